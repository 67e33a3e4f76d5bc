//! Per-channel discretized logistic prior over quantized latents.

use crate::bitstream::SymbolTable;
use crate::delta_prior::{bin_prob, floored_bits, portable_bin_prob};
use crate::scalar::{portable_exp, Scalar};

/// Smallest latent symbol the coder can represent.
pub const LATENT_MIN: i32 = -127;
/// Largest latent symbol the coder can represent.
pub const LATENT_MAX: i32 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPrior<T> {
    /// Location `μ_c` per channel.
    pub loc: Vec<T>,
    /// `ln s_c` per channel, so that scales stay positive.
    pub log_scale: Vec<T>,
}

/// Rate of a latent tensor with gradients for STE training.
pub struct LatentRate<T> {
    pub bits: T,
    /// `∂bits/∂ŷ` per element.
    pub d_symbols: Vec<T>,
    pub d_loc: Vec<T>,
    pub d_log_scale: Vec<T>,
}

impl<T: Scalar> LatentPrior<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            loc: vec![T::zero(); channels],
            log_scale: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn scale(&self, c: usize) -> T {
        self.log_scale[c].exp()
    }

    /// Bits of quantized symbols laid out channel-major with `plane` per channel.
    pub fn rate_bits(&self, symbols: &[i32], plane: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..self.channels() {
            let mu = self.loc[c].as_f64();
            let s = self.scale(c).as_f64();
            for &q in &symbols[c * plane..(c + 1) * plane] {
                let b = bin_prob(q as f64, 0.5, mu, s);
                total += floored_bits(b.p).0;
            }
        }
        total
    }

    pub fn rate_with_grad(&self, symbols: &[T], plane: usize, want_prior_grad: bool) -> LatentRate<T> {
        let half = T::lit(0.5);
        let mut bits = T::zero();
        let mut d_symbols = Vec::with_capacity(symbols.len());
        let mut d_loc = vec![T::zero(); self.channels()];
        let mut d_log_scale = vec![T::zero(); self.channels()];
        for c in 0..self.channels() {
            let mu = self.loc[c];
            let s = self.scale(c);
            for &q in &symbols[c * plane..(c + 1) * plane] {
                let b = bin_prob(q, half, mu, s);
                let (v, dbits_dp) = floored_bits(b.p);
                bits += v;
                d_symbols.push(dbits_dp * b.d_center);
                if want_prior_grad {
                    d_loc[c] += dbits_dp * b.d_mu;
                    d_log_scale[c] += dbits_dp * b.d_s * s;
                }
            }
        }
        LatentRate {
            bits,
            d_symbols,
            d_loc,
            d_log_scale,
        }
    }

    /// Coder table for one channel over `LATENT_MIN..=LATENT_MAX`.
    pub fn symbol_table(&self, channel: usize) -> SymbolTable {
        let mu = self.loc[channel].as_f64();
        let s = portable_exp(self.log_scale[channel].as_f64());
        let probs: Vec<f64> = (LATENT_MIN..=LATENT_MAX)
            .map(|k| portable_bin_prob(k as f64, 0.5, mu, s))
            .collect();
        SymbolTable::from_probabilities(&probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_logistic_zero_symbol() {
        // P(0) = c(0.5) − c(−0.5) = tanh(0.25) for μ = 0, s = 1.
        let prior = LatentPrior::<f64>::new(1);
        let bits = prior.rate_bits(&[0], 1);
        assert!((2f64.powf(-bits) - 0.25f64.tanh()).abs() < 1e-12);
        assert!((2f64.powf(-bits) - 0.244919).abs() < 1e-6);
        assert!((bits - 2.0296).abs() < 1e-4);
    }

    #[test]
    fn floor_caps_extreme_symbols() {
        let prior = LatentPrior::<f64>::new(1);
        assert!(prior.rate_bits(&[1000], 1) <= 20.0);
        assert_eq!(prior.rate_bits(&[1000], 1), 20.0);
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let mut prior = LatentPrior::<f64>::new(2);
        prior.loc = vec![0.3, -0.4];
        prior.log_scale = vec![0.2, -0.5];
        let symbols = vec![0.0, 1.0, -2.0, 3.0, 0.0, -1.0];
        let r = prior.rate_with_grad(&symbols, 3, true);
        let h = 1e-6;
        for c in 0..2 {
            let mut p = prior.clone();
            p.loc[c] += h;
            let up = p.rate_with_grad(&symbols, 3, false).bits;
            p.loc[c] -= 2.0 * h;
            let dn = p.rate_with_grad(&symbols, 3, false).bits;
            assert!(((up - dn) / (2.0 * h) - r.d_loc[c]).abs() < 1e-6);
            let mut p = prior.clone();
            p.log_scale[c] += h;
            let up = p.rate_with_grad(&symbols, 3, false).bits;
            p.log_scale[c] -= 2.0 * h;
            let dn = p.rate_with_grad(&symbols, 3, false).bits;
            assert!(((up - dn) / (2.0 * h) - r.d_log_scale[c]).abs() < 1e-6);
        }
    }
}
