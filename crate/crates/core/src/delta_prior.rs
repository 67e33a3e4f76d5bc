//! Fixed logistic prior over decoder update parameters.
//!
//! Updates are quantized on a uniform grid of width `w`; each grid index `i`
//! has mass `c(i·w + w/2) − c(i·w − w/2)` with `c` the logistic CDF. The same
//! bin-probability routine drives the per-channel latent prior (with `w = 1`).

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitstream::SymbolTable;
use crate::error::{Error, Result};
use crate::scalar::{portable_sigmoid, Scalar};

/// Smallest probability any symbol is assigned.
pub const PROB_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPriorConfig {
    /// Quantization interval.
    pub w: f64,
    pub mu: f64,
    /// Logistic scale.
    pub s: f64,
    /// Indices are clamped to `[-max_index, max_index]`.
    pub max_index: i32,
}

impl Default for DeltaPriorConfig {
    fn default() -> Self {
        Self {
            w: 0.01,
            mu: 0.0,
            s: 0.05,
            max_index: 255,
        }
    }
}

impl DeltaPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::Contract(format!("quantization interval w must be > 0, got {}", self.w)));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Contract(format!("prior scale s must be > 0, got {}", self.s)));
        }
        if !self.mu.is_finite() {
            return Err(Error::Contract("prior location must be finite".into()));
        }
        if self.max_index < 1 || self.max_index > 32767 {
            return Err(Error::Contract(format!("max_index must be in [1, 32767], got {}", self.max_index)));
        }
        Ok(())
    }

    pub fn alphabet_size(&self) -> usize {
        2 * self.max_index as usize + 1
    }
}

/// Logistic CDF `0.5 + 0.5·tanh((d − μ)/(2s))`.
pub fn cdf(d: f64, config: &DeltaPriorConfig) -> f64 {
    0.5 + 0.5 * ((d - config.mu) / (2.0 * config.s)).tanh()
}

/// Probability of a logistic variable falling in `[center − half, center + half]`,
/// together with its partial derivatives in `(center, mu, s)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BinProb<T> {
    pub p: T,
    pub d_center: T,
    pub d_mu: T,
    pub d_s: T,
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bin_prob<T: Scalar>(center: T, half: T, mu: T, s: T) -> BinProb<T> {
    let za = (center + half - mu) / s;
    let zb = (center - half - mu) / s;
    // Evaluate on the side of the mode that avoids cancellation near 1.
    let (sa, sb) = if center > mu {
        (T::one() - sigmoid(-za), T::one() - sigmoid(-zb))
    } else {
        (sigmoid(za), sigmoid(zb))
    };
    let p = if center > mu {
        sigmoid(-zb) - sigmoid(-za)
    } else {
        sa - sb
    };
    let da = sa * (T::one() - sa);
    let db = sb * (T::one() - sb);
    let d_center = (da - db) / s;
    BinProb {
        p,
        d_center,
        d_mu: -d_center,
        d_s: -(da * za - db * zb) / s,
    }
}

/// Bits for a bin probability with the floor applied; the gradient factor is
/// `d bits / d p`, zero on the floor.
#[inline]
pub(crate) fn floored_bits<T: Scalar>(p: T) -> (T, T) {
    let floor = T::lit(PROB_FLOOR);
    if p > floor {
        let ln2 = T::lit(LN_2);
        (-p.ln() / ln2, -T::one() / (p * ln2))
    } else {
        (T::lit(20.0), T::zero())
    }
}

fn check_index(index: i64, config: &DeltaPriorConfig) -> Result<()> {
    if index.abs() > config.max_index as i64 {
        return Err(Error::Range {
            index,
            max: config.max_index as i64,
        });
    }
    Ok(())
}

/// Unfloored probability mass of a grid index.
pub fn symbol_mass(index: i64, config: &DeltaPriorConfig) -> Result<f64> {
    check_index(index, config)?;
    let b = bin_prob(index as f64 * config.w, config.w / 2.0, config.mu, config.s);
    Ok(b.p)
}

/// Probability of a grid index, floored at 2⁻²⁰.
pub fn symbol_prob(index: i64, config: &DeltaPriorConfig) -> Result<f64> {
    Ok(symbol_mass(index, config)?.max(PROB_FLOOR))
}

pub fn symbol_bits(index: i64, config: &DeltaPriorConfig) -> Result<f64> {
    Ok(-symbol_prob(index, config)?.log2())
}

/// Integer-quantized update parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedDelta {
    pub indices: Vec<i32>,
    pub config: DeltaPriorConfig,
}

impl QuantizedDelta {
    pub fn dequantize<T: Scalar>(&self) -> Vec<T> {
        self.indices
            .iter()
            .map(|&i| T::lit(i as f64 * self.config.w))
            .collect()
    }

    /// Exact hard-quantized rate in bits.
    pub fn rate_bits(&self) -> f64 {
        self.indices
            .iter()
            .map(|&i| symbol_bits(i as i64, &self.config).expect("indices are clamped"))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Grid index of one value: round-half-to-even, clamped.
#[inline]
pub fn quantize_index<T: Scalar>(value: T, config: &DeltaPriorConfig) -> i32 {
    let r = (value.as_f64() / config.w).round_ties_even();
    let m = config.max_index as f64;
    r.clamp(-m, m) as i32
}

pub fn quantize_delta<T: Scalar>(values: &[T], config: &DeltaPriorConfig) -> QuantizedDelta {
    QuantizedDelta {
        indices: values.iter().map(|&v| quantize_index(v, config)).collect(),
        config: *config,
    }
}

/// Hard-quantized rate of raw values.
pub fn delta_rate<T: Scalar>(values: &[T], config: &DeltaPriorConfig) -> f64 {
    quantize_delta(values, config).rate_bits()
}

/// Differentiable rate proxy: each value is perturbed by `U(−w/2, w/2)` noise
/// and charged `−log₂(c(v + w/2) − c(v − w/2))`. Returns the total bits and
/// the gradient with respect to each value.
pub fn noisy_delta_rate<T: Scalar, R: Rng + ?Sized>(
    values: &[T],
    config: &DeltaPriorConfig,
    rng: &mut R,
) -> (T, Vec<T>) {
    let half = T::lit(config.w / 2.0);
    let mu = T::lit(config.mu);
    let s = T::lit(config.s);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(values.len());
    for &v in values {
        let u: f64 = rng.random_range(-0.5..0.5) * config.w;
        let b = bin_prob(v + T::lit(u), half, mu, s);
        let (bits, dbits_dp) = floored_bits(b.p);
        total += bits;
        grad.push(dbits_dp * b.d_center);
    }
    (total, grad)
}

/// Coder table over indices `-max_index..=max_index` (symbol `i + max_index`).
///
/// Built with platform-independent arithmetic so that encoder and decoder
/// derive the same frequencies from the configuration alone.
pub fn delta_symbol_table(config: &DeltaPriorConfig) -> SymbolTable {
    let probs: Vec<f64> = (-config.max_index..=config.max_index)
        .map(|i| {
            let center = i as f64 * config.w;
            portable_bin_prob(center, config.w / 2.0, config.mu, config.s)
        })
        .collect();
    SymbolTable::from_probabilities(&probs)
}

/// Floored logistic bin probability computed with [`portable_sigmoid`].
pub(crate) fn portable_bin_prob(center: f64, half: f64, mu: f64, s: f64) -> f64 {
    let za = (center + half - mu) / s;
    let zb = (center - half - mu) / s;
    let p = if center > mu {
        portable_sigmoid(-zb) - portable_sigmoid(-za)
    } else {
        portable_sigmoid(za) - portable_sigmoid(zb)
    };
    p.max(PROB_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent oracle: the tanh form evaluated directly.
    fn oracle_prob(index: i64, cfg: &DeltaPriorConfig) -> f64 {
        let x = index as f64 * cfg.w;
        cdf(x + cfg.w / 2.0, cfg) - cdf(x - cfg.w / 2.0, cfg)
    }

    #[test]
    fn cdf_examples() {
        let cfg = DeltaPriorConfig::default();
        assert_eq!(cdf(0.0, &cfg), 0.5);
        assert!((cdf(0.005, &cfg) - 0.524979).abs() < 1e-6);
        assert!((cdf(1e6, &cfg) - 1.0).abs() < 1e-15);
        let shifted = DeltaPriorConfig { mu: 0.3, ..cfg };
        assert_eq!(cdf(0.3, &shifted), 0.5);
    }

    #[test]
    fn symbol_prob_examples() {
        let cfg = DeltaPriorConfig::default();
        let p0 = symbol_prob(0, &cfg).unwrap();
        assert!((p0 - 0.05f64.tanh()).abs() < 1e-12);
        assert!((p0 - 0.0499584).abs() < 1e-6);
        assert!((-p0.log2() - 4.3231).abs() < 1e-3);
        let p1 = symbol_prob(1, &cfg).unwrap();
        assert!((p1 - 0.5 * (0.15f64.tanh() - 0.05f64.tanh())).abs() < 1e-12);
        assert!((p1 - 0.0494633).abs() < 1e-6);
        assert!(matches!(symbol_prob(256, &cfg), Err(Error::Range { index: 256, .. })));
    }

    #[test]
    fn quantize_examples() {
        let cfg = DeltaPriorConfig::default();
        let q = quantize_delta(&[0.0237f64, 0.005, -0.015, 100.0], &cfg);
        assert_eq!(q.indices, vec![2, 0, -2, 255]);
        let d: Vec<f64> = q.dequantize();
        assert!((d[0] - 0.02).abs() < 1e-12);
        let zeros = quantize_delta(&[0.0f32; 17], &cfg);
        assert!(zeros.indices.iter().all(|&i| i == 0));
        let bits0 = symbol_bits(0, &cfg).unwrap();
        assert!((zeros.rate_bits() - 17.0 * bits0).abs() < 1e-9);
    }

    #[test]
    fn rate_examples() {
        let cfg = DeltaPriorConfig::default();
        let r = delta_rate(&vec![0.0f64; 768], &cfg);
        assert!((r - 3320.1).abs() < 0.1, "{r}");
        assert_eq!(delta_rate::<f64>(&[], &cfg), 0.0);
    }

    #[test]
    fn noise_proxy_tracks_hard_rate_at_zero() {
        let cfg = DeltaPriorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 1000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let (bits, _) = noisy_delta_rate(&[0.0f64], &cfg, &mut rng);
            acc += bits;
        }
        let hard = symbol_bits(0, &cfg).unwrap();
        assert!(((acc / draws as f64) - hard).abs() / hard < 0.02);
    }

    #[test]
    fn noise_proxy_gradient_matches_finite_difference() {
        // Same seed gives the same noise, so FD on the value isolates the gradient.
        let cfg = DeltaPriorConfig::default();
        for &v in &[-0.07f64, -0.01, 0.003, 0.04, 0.2] {
            let (_, g) = noisy_delta_rate(&[v], &cfg, &mut ChaCha8Rng::seed_from_u64(3));
            let h = 1e-7;
            let (a, _) = noisy_delta_rate(&[v + h], &cfg, &mut ChaCha8Rng::seed_from_u64(3));
            let (b, _) = noisy_delta_rate(&[v - h], &cfg, &mut ChaCha8Rng::seed_from_u64(3));
            let fd = (a - b) / (2.0 * h);
            assert!((fd - g[0]).abs() <= 1e-4 * fd.abs().max(1.0), "{v}: {fd} vs {}", g[0]);
        }
    }

    #[test]
    fn bin_prob_partials() {
        let (c, half, mu, s) = (0.3f64, 0.5, -0.2, 0.7);
        let b = bin_prob(c, half, mu, s);
        let h = 1e-6;
        let f = |c: f64, mu: f64, s: f64| bin_prob(c, half, mu, s).p;
        assert!(((f(c + h, mu, s) - f(c - h, mu, s)) / (2.0 * h) - b.d_center).abs() < 1e-8);
        assert!(((f(c, mu + h, s) - f(c, mu - h, s)) / (2.0 * h) - b.d_mu).abs() < 1e-8);
        assert!(((f(c, mu, s + h) - f(c, mu, s - h)) / (2.0 * h) - b.d_s).abs() < 1e-8);
    }

    #[test]
    fn mass_sums_below_one_and_table_normalizes() {
        let cfg = DeltaPriorConfig::default();
        let total: f64 = (-255..=255).map(|i| symbol_mass(i, &cfg).unwrap()).sum();
        assert!(total <= 1.0 + 1e-12);
        assert!(total > 0.999_999);
        let table = delta_symbol_table(&cfg);
        assert_eq!(table.total(), 1 << 16);
        assert_eq!(table.len(), 511);
        assert_eq!(delta_symbol_table(&cfg), table);
    }

    #[test]
    fn prob_unimodal_at_zero() {
        let cfg = DeltaPriorConfig::default();
        for k in 0..255 {
            let a = symbol_prob(k, &cfg).unwrap();
            let b = symbol_prob(k + 1, &cfg).unwrap();
            assert!(a >= b);
        }
    }

    proptest! {
        #[test]
        fn symmetric_prob(k in 0i64..=255) {
            let cfg = DeltaPriorConfig::default();
            let a = symbol_prob(k, &cfg).unwrap();
            let b = symbol_prob(-k, &cfg).unwrap();
            prop_assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
            prop_assert!((a - oracle_prob(k, &cfg).max(PROB_FLOOR)).abs() < 1e-12);
        }

        #[test]
        fn quantize_dequantize_idempotent(idx in proptest::collection::vec(-255i32..=255, 0..64)) {
            let cfg = DeltaPriorConfig::default();
            let q = QuantizedDelta { indices: idx.clone(), config: cfg };
            let again = quantize_delta(&q.dequantize::<f64>(), &cfg);
            prop_assert_eq!(again.indices, idx);
            let again32 = quantize_delta(&q.dequantize::<f32>(), &cfg);
            prop_assert_eq!(again32.indices, q.indices);
        }

        #[test]
        fn quantization_error_bounded(v in -2.5f64..2.5) {
            let cfg = DeltaPriorConfig::default();
            let q = quantize_delta(&[v], &cfg);
            let d: Vec<f64> = q.dequantize();
            prop_assert!((d[0] - v).abs() <= cfg.w / 2.0 + 1e-12);
        }

        #[test]
        fn cdf_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let cfg = DeltaPriorConfig::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(cdf(lo, &cfg) <= cdf(hi, &cfg));
        }
    }
}
