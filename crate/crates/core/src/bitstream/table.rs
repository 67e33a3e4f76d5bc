/// Frequency table with 16-bit precision.
pub const TABLE_BITS: u32 = 16;
pub const TABLE_TOTAL: u32 = 1 << TABLE_BITS;

/// Cumulative frequencies over a finite alphabet, totalling [`TABLE_TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    /// `cumulative[i]` is the start of symbol `i`; has `len + 1` entries.
    cumulative: Vec<u32>,
}

impl SymbolTable {
    /// Scales probabilities to integer frequencies, each at least 1. Rounding
    /// slack goes to the most probable symbol (lowest index on ties).
    pub fn from_probabilities(probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n >= 1 && (n as u32) < TABLE_TOTAL, "alphabet size {n} unsupported");
        let mass: f64 = probs.iter().sum();
        let budget = (TABLE_TOTAL - n as u32) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| 1 + ((p / mass) * budget).floor() as u32)
            .collect();
        let used: u32 = freqs.iter().sum();
        let mode = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        freqs[mode] += TABLE_TOTAL - used;
        Self::from_frequencies(&freqs)
    }

    pub fn from_frequencies(freqs: &[u32]) -> Self {
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cumulative.push(0);
        for &f in freqs {
            assert!(f > 0, "zero-frequency symbol");
            acc += f;
            cumulative.push(acc);
        }
        assert_eq!(acc, TABLE_TOTAL, "frequencies must sum to {TABLE_TOTAL}");
        Self { cumulative }
    }

    pub fn len(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> u32 {
        TABLE_TOTAL
    }

    #[inline]
    pub fn start(&self, symbol: usize) -> u32 {
        self.cumulative[symbol]
    }

    #[inline]
    pub fn freq(&self, symbol: usize) -> u32 {
        self.cumulative[symbol + 1] - self.cumulative[symbol]
    }

    /// Symbol whose interval contains `target`.
    #[inline]
    pub fn lookup(&self, target: u32) -> usize {
        // last i with cumulative[i] <= target
        self.cumulative.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of a symbol under the quantized table.
    pub fn bits(&self, symbol: usize) -> f64 {
        (TABLE_TOTAL as f64 / self.freq(symbol) as f64).log2()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_strictly_increasing() {
        let t = SymbolTable::from_probabilities(&[0.5, 0.0, 1e-9, 0.25, 0.25]);
        assert_eq!(t.total(), TABLE_TOTAL);
        for s in 0..t.len() {
            assert!(t.freq(s) >= 1);
            assert_eq!(t.lookup(t.start(s)), s);
            assert_eq!(t.lookup(t.start(s) + t.freq(s) - 1), s);
        }
    }
}
