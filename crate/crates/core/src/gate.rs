//! Per-layer gate networks and the gate bit vector.
//!
//! A gate network maps the input feature map of an adaptable layer to the
//! probability of applying that layer's update:
//! conv 3×3 (stride 2, 8 channels) → ReLU → global average pool → FC(8→2) →
//! softmax. The forward value is the hard decision `1[p ≥ 0.5]`; the
//! backward pass treats it as the soft probability `p` (straight-through).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{ConvLayer, LayerShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, relu, relu_backward, ConvCache, ConvGrads, Tensor};

pub const GATE_CHANNELS: usize = 8;

/// Hard/soft gate bits for all adaptable layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub bits: Vec<bool>,
    /// Execute-class probabilities, present only during adaptation.
    pub soft: Option<Vec<f64>>,
}

impl GateVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits, soft: None }
    }

    pub fn from_soft(soft: Vec<f64>) -> Self {
        Self {
            bits: soft.iter().map(|&p| p >= 0.5).collect(),
            soft: Some(soft),
        }
    }

    pub fn all(k: usize, open: bool) -> Self {
        Self::from_bits(vec![open; k])
    }

    /// First `m` of `k` layers open.
    pub fn first(k: usize, m: usize) -> Self {
        Self::from_bits((0..k).map(|i| i < m).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn open_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Packs bits MSB-first into `⌈K/8⌉` bytes.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], k: usize) -> Result<Self> {
        if bytes.len() != k.div_ceil(8) {
            return Err(Error::Format(format!("{} gate bytes for {k} gates", bytes.len())));
        }
        let bits = (0..k).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        let unused = (k..bytes.len() * 8).any(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0);
        if unused {
            return Err(Error::Format("padding bits in gate bytes must be zero".into()));
        }
        Ok(Self::from_bits(bits))
    }
}

/// `true` when all gates are forced open at adaptation step `step`.
pub fn warmup_override(step: usize, warmup: usize) -> bool {
    step <= warmup
}

/// Gate output: `value` is the hard bit, gradients flow to `soft`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StraightThrough<T> {
    pub value: T,
    pub soft: T,
}

impl<T: Scalar> StraightThrough<T> {
    pub fn from_soft(soft: T) -> Self {
        let value = if soft >= T::lit(0.5) { T::one() } else { T::zero() };
        Self { value, soft }
    }

    pub fn hard(&self) -> bool {
        self.value == T::one()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateNetwork<T> {
    pub layer_index: usize,
    pub conv: ConvLayer<T>,
    /// `2 × GATE_CHANNELS`, row 1 is the execute class.
    pub fc_weight: Vec<T>,
    pub fc_bias: Vec<T>,
}

pub struct GateCache<T> {
    conv: ConvCache<T>,
    pre_relu: Tensor<T>,
    pooled: Vec<T>,
    soft: T,
}

impl<T: Scalar> GateNetwork<T> {
    /// The classifier head starts at zero, so every gate begins at `p = 0.5`
    /// (open) and the first updates decide which side it falls on.
    pub fn new(in_channels: usize, layer_index: usize, seed: u64) -> Self {
        let shape = LayerShape::new(GATE_CHANNELS, in_channels, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (shape.inner() as f64).sqrt()).expect("valid std");
        Self {
            layer_index,
            conv: ConvLayer {
                shape,
                stride: 2,
                weight: (0..shape.weight_len()).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                bias: vec![T::zero(); GATE_CHANNELS],
            },
            fc_weight: vec![T::zero(); 2 * GATE_CHANNELS],
            fc_bias: vec![T::zero(); 2],
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.len() + self.conv.bias.len() + self.fc_weight.len() + self.fc_bias.len()
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.conv.weight);
        v.extend_from_slice(&self.conv.bias);
        v.extend_from_slice(&self.fc_weight);
        v.extend_from_slice(&self.fc_bias);
        v
    }

    pub fn set_flat_params(&mut self, p: &[T]) {
        let (w, rest) = p.split_at(self.conv.weight.len());
        let (b, rest) = rest.split_at(self.conv.bias.len());
        let (fw, fb) = rest.split_at(self.fc_weight.len());
        self.conv.weight.copy_from_slice(w);
        self.conv.bias.copy_from_slice(b);
        self.fc_weight.copy_from_slice(fw);
        self.fc_bias.copy_from_slice(fb);
    }

    pub fn forward(&self, h: &Tensor<T>) -> Result<(StraightThrough<T>, GateCache<T>)> {
        if h.channels != self.conv.shape.c_in {
            return Err(Error::Shape(format!(
                "gate {} expects {} channels, got {}",
                self.layer_index, self.conv.shape.c_in, h.channels
            )));
        }
        let (z, conv) = self.conv.forward(h);
        let a = relu(&z);
        let plane = T::lit(a.plane() as f64);
        let pooled: Vec<T> = (0..GATE_CHANNELS)
            .map(|c| a.data[c * a.plane()..(c + 1) * a.plane()].iter().copied().sum::<T>() / plane)
            .collect();
        let logit = |j: usize| {
            (0..GATE_CHANNELS).fold(self.fc_bias[j], |acc, i| acc + self.fc_weight[j * GATE_CHANNELS + i] * pooled[i])
        };
        // softmax over two classes = sigmoid of the logit difference
        let diff = logit(1) - logit(0);
        let soft = T::one() / (T::one() + (-diff).exp());
        Ok((
            StraightThrough::from_soft(soft),
            GateCache {
                conv,
                pre_relu: z,
                pooled,
                soft,
            },
        ))
    }

    /// Parameter gradients given `∂L/∂g`, routed through the soft probability.
    pub fn backward(&self, cache: &GateCache<T>, d_gate: T) -> Vec<T> {
        let s = cache.soft;
        let d_diff = d_gate * s * (T::one() - s);
        let dz = [-d_diff, d_diff];
        let mut d_fc_w = vec![T::zero(); 2 * GATE_CHANNELS];
        let mut d_pooled = vec![T::zero(); GATE_CHANNELS];
        for j in 0..2 {
            for i in 0..GATE_CHANNELS {
                d_fc_w[j * GATE_CHANNELS + i] = dz[j] * cache.pooled[i];
                d_pooled[i] += dz[j] * self.fc_weight[j * GATE_CHANNELS + i];
            }
        }
        let z = &cache.pre_relu;
        let plane = z.plane();
        let inv = T::one() / T::lit(plane as f64);
        let mut da = Tensor::zeros(z.channels, z.height, z.width);
        for c in 0..GATE_CHANNELS {
            da.data[c * plane..(c + 1) * plane].fill(d_pooled[c] * inv);
        }
        let dzc = relu_backward(z, &da);
        let back = conv2d_backward(
            &dzc,
            &self.conv.weight,
            &cache.conv,
            self.conv.geometry(),
            ConvGrads {
                input: false,
                weight: true,
                center_only: false,
            },
        );
        let mut out = back.d_weight.expect("weight grad");
        out.extend(back.d_bias);
        out.extend(d_fc_w);
        out.extend(dz);
        out
    }
}

/// Hard decision and soft probability for one feature map.
pub fn gate_forward<T: Scalar>(h: &Tensor<T>, net: &GateNetwork<T>) -> Result<(bool, T)> {
    let (st, _) = net.forward(h)?;
    Ok((st.hard(), st.soft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn threshold_convention() {
        assert_eq!(StraightThrough::from_soft(0.7f64).value, 1.0);
        assert_eq!(StraightThrough::from_soft(0.3f64).value, 0.0);
        assert_eq!(StraightThrough::from_soft(0.5f64).value, 1.0);
        assert!(!StraightThrough::from_soft(0.4999f32).hard());
    }

    #[test]
    fn fresh_gate_is_half_open() {
        let net = GateNetwork::<f64>::new(16, 0, 1);
        let h = Tensor::from_vec(16, 4, 4, (0..256).map(|i| (i as f64).sin()).collect());
        let (hard, soft) = gate_forward(&h, &net).unwrap();
        assert!(hard);
        assert_eq!(soft, 0.5);
    }

    #[test]
    fn warmup_examples() {
        assert!(warmup_override(0, 100));
        assert!(warmup_override(100, 100));
        assert!(!warmup_override(101, 100));
        assert!(warmup_override(0, 0));
    }

    #[test]
    fn packing_is_msb_first() {
        let g = GateVector::from_bits(vec![true, false, true, false]);
        assert_eq!(g.pack(), vec![0b1010_0000]);
        assert_eq!(GateVector::unpack(&g.pack(), 4).unwrap(), g);
        let long = GateVector::from_bits((0..11).map(|i| i % 3 == 0).collect());
        assert_eq!(long.pack().len(), 2);
        assert_eq!(GateVector::unpack(&long.pack(), 11).unwrap(), long);
        assert!(GateVector::unpack(&[0b0000_1000], 4).is_err());
    }

    #[test]
    fn soft_path_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = GateNetwork::<f64>::new(6, 0, 2);
        let p: Vec<f64> = net.flat_params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        net.set_flat_params(&p);
        let h = Tensor::from_vec(6, 8, 8, (0..384).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, cache) = net.forward(&h).unwrap();
        let grad = net.backward(&cache, 1.0);
        let step = 1e-4;
        for i in (0..p.len()).step_by(7) {
            let mut q = p.clone();
            q[i] += step;
            net.set_flat_params(&q);
            let up = net.forward(&h).unwrap().0.soft;
            q[i] -= 2.0 * step;
            net.set_flat_params(&q);
            let dn = net.forward(&h).unwrap().0.soft;
            let fd = (up - dn) / (2.0 * step);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-10);
            assert!(rel < 1e-3 || (fd - grad[i]).abs() < 1e-10, "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
