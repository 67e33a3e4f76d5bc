//! The base transform-coding codec.
//!
//! Analysis: four 3×3 convolutions (stride 2, 2, 2, 1 for a downsampling
//! factor of 8; all stride 2 for 16) with leaky-ReLU between them.
//! Synthesis mirrors it with nearest-neighbour upsampling and a final 2×
//! pixel shuffle; its four convolutions are the adaptable layers `1..=K`.

mod checkpoint;
mod prior;
mod train;

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, PRECISION_POLICY};
pub use prior::{LatentPrior, LatentRate, LATENT_MAX, LATENT_MIN};
pub use train::{rd_loss, train_base, TrainConfig, TrainReport};

use crate::adapters::{apply_update_backward, apply_update_forward, ConvLayer, LayerShape, LayerUpdate, UpdateCache, UpdateGrads};
use crate::error::{Error, Result};
use crate::gate::GateVector;
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d_backward, leaky_relu, leaky_relu_backward, pixel_shuffle2, pixel_unshuffle2,
    ConvCache, ConvGrads, Tensor,
};

/// Number of adaptable synthesis layers.
pub const ADAPTABLE_LAYERS: usize = 4;
/// Distortion is MSE on `[0, 1]` pixels scaled to the 8-bit range.
/// Initial latent scale: latents start spread over several quantization bins
/// instead of collapsing to zero on the first rounding.
const LATENT_GAIN: f64 = 8.0;

pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
    static ANALYSIS_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Forward passes of the analysis transform on this thread.
pub fn analysis_pass_count() -> u64 {
    ANALYSIS_PASSES.with(|c| c.get())
}

/// Backward passes run through either transform on this thread.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.with(|c| c.get())
}

fn count_backward() {
    BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    /// 8 or 16.
    pub downsampling: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 32,
            hidden_channels: 16,
            downsampling: 8,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsampling, 8 | 16) {
            return Err(Error::Contract(format!("downsampling must be 8 or 16, got {}", self.downsampling)));
        }
        if self.latent_channels == 0 || self.hidden_channels < 12 {
            return Err(Error::Contract("need latent_channels >= 1 and hidden_channels >= 12".into()));
        }
        Ok(())
    }

    fn analysis_strides(&self) -> [usize; 4] {
        if self.downsampling == 16 {
            [2, 2, 2, 2]
        } else {
            [2, 2, 2, 1]
        }
    }

    /// Whether the output of synthesis layer `k` is pixel-shuffled up ×2.
    fn shuffle_after(&self, k: usize) -> bool {
        k != 2 || self.downsampling == 16
    }

    pub fn synthesis_shapes(&self) -> [LayerShape; ADAPTABLE_LAYERS] {
        let (c, n) = (self.latent_channels, self.hidden_channels);
        let wide = |k: usize| if self.shuffle_after(k) { 4 * n } else { n };
        [
            LayerShape::new(wide(0), c, 3, 3),
            LayerShape::new(wide(1), n, 3, 3),
            LayerShape::new(wide(2), n, 3, 3),
            LayerShape::new(12, n, 3, 3),
        ]
    }

    fn analysis_shapes(&self) -> [LayerShape; 4] {
        let (c, n) = (self.latent_channels, self.hidden_channels);
        [
            LayerShape::new(n, 3, 3, 3),
            LayerShape::new(n, n, 3, 3),
            LayerShape::new(4 * n, n, 3, 3),
            LayerShape::new(c, 4 * n, 3, 3),
        ]
    }
}

/// Quantizes one latent value: nearest integer (ties to even), clamped to the coder alphabet.
#[inline]
pub fn quantize_latent_value<T: Scalar>(v: T) -> i32 {
    (v.as_f64().round_ties_even()).clamp(LATENT_MIN as f64, LATENT_MAX as f64) as i32
}

/// Latent `y` and, once quantized, `ŷ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub values: Tensor<T>,
    pub quantized: Option<Vec<i32>>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Tensor<T>) -> Self {
        Self {
            values,
            quantized: None,
        }
    }

    pub fn quantize(&mut self) {
        self.quantized = Some(self.values.data.iter().map(|&v| quantize_latent_value(v)).collect());
    }

    pub fn quantized(mut self) -> Self {
        self.quantize();
        self
    }

    /// Builds a code directly from integer symbols.
    pub fn from_symbols(channels: usize, height: usize, width: usize, symbols: Vec<i32>) -> Self {
        let values = Tensor::from_vec(channels, height, width, symbols.iter().map(|&q| T::lit(q as f64)).collect());
        Self {
            values,
            quantized: Some(symbols),
        }
    }

    /// `ŷ` as a real tensor.
    pub fn quantized_tensor(&self) -> Result<Tensor<T>> {
        let q = self
            .quantized
            .as_ref()
            .ok_or_else(|| Error::Contract("latent must be quantized".into()))?;
        Ok(Tensor::from_vec(
            self.values.channels,
            self.values.height,
            self.values.width,
            q.iter().map(|&v| T::lit(v as f64)).collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel<T> {
    pub config: CodecConfig,
    /// λ the model was trained with; adaptation reuses it.
    pub lambda: f64,
    pub analysis: Vec<ConvLayer<T>>,
    pub synthesis: Vec<ConvLayer<T>>,
    pub prior: LatentPrior<T>,
}

/// Intermediate values of an analysis pass.
pub struct AnalysisState<T> {
    caches: Vec<ConvCache<T>>,
    pre_act: Vec<Tensor<T>>,
    pub latent: Tensor<T>,
}

/// Intermediate values of a synthesis pass.
pub struct SynthesisState<T> {
    /// Input feature map `h^k` of each adaptable layer.
    pub inputs: Vec<Tensor<T>>,
    caches: Vec<UpdateCache<T>>,
    pre_act: Vec<Tensor<T>>,
    pub gates: Vec<T>,
    /// Unclamped reconstruction.
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct SynthesisGrads<T> {
    pub d_latent: Option<Tensor<T>>,
    /// Per-layer gradients of `LayerUpdate::params` (empty without an update).
    pub d_updates: Vec<Vec<T>>,
    pub d_gates: Vec<T>,
    /// Per-layer `(d_weight, d_bias)` of the base synthesis convolutions.
    pub d_base: Option<Vec<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> CodecModel<T> {
    /// Randomly initialized model.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strides = config.analysis_strides();
        let mut make = |shape: LayerShape, stride: usize, gain: f64| {
            let std = gain / (shape.inner() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            ConvLayer {
                shape,
                stride,
                weight: (0..shape.weight_len()).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                bias: vec![T::zero(); shape.c_out],
            }
        };
        let analysis: Vec<_> = config
            .analysis_shapes()
            .into_iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (s, st))| make(s, st, if i == 3 { LATENT_GAIN } else { 1.2 }))
            .collect();
        let mut synthesis: Vec<_> = config
            .synthesis_shapes()
            .into_iter()
            .enumerate()
            .map(|(k, s)| make(s, 1, if k == 0 { 1.2 / LATENT_GAIN } else { 1.2 }))
            .collect();
        for b in synthesis[ADAPTABLE_LAYERS - 1].bias.iter_mut() {
            *b = T::lit(0.5);
        }
        Ok(Self {
            config,
            lambda: 0.0,
            analysis,
            synthesis,
            prior: LatentPrior::new(config.latent_channels),
        })
    }

    pub fn downsampling(&self) -> usize {
        self.config.downsampling
    }

    pub fn layer_count(&self) -> usize {
        ADAPTABLE_LAYERS
    }

    pub fn layer_shape(&self, k: usize) -> LayerShape {
        self.synthesis[k].shape
    }

    pub fn check_image(&self, image: &ImageTensor<T>) -> Result<()> {
        let s = self.downsampling();
        if image.height() % s != 0 || image.width() % s != 0 || image.height() == 0 || image.width() == 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not a positive multiple of the downsampling factor {s}; pad it first",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn analysis_forward(&self, image: &ImageTensor<T>) -> Result<AnalysisState<T>> {
        ANALYSIS_PASSES.with(|c| c.set(c.get() + 1));
        self.check_image(image)?;
        let mut h = image.pixels.clone();
        let mut caches = Vec::with_capacity(4);
        let mut pre_act = Vec::with_capacity(3);
        for (i, layer) in self.analysis.iter().enumerate() {
            let (z, cache) = layer.forward(&h);
            caches.push(cache);
            if i + 1 < self.analysis.len() {
                h = leaky_relu(&z);
                pre_act.push(z);
            } else {
                h = z;
            }
        }
        Ok(AnalysisState {
            caches,
            pre_act,
            latent: h,
        })
    }

    /// Weight and bias gradients of the analysis transform.
    pub fn analysis_backward(&self, state: &AnalysisState<T>, d_latent: &Tensor<T>) -> Vec<(Vec<T>, Vec<T>)> {
        count_backward();
        let n = self.analysis.len();
        let mut grads = vec![(Vec::new(), Vec::new()); n];
        let mut d = d_latent.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                d = leaky_relu_backward(&state.pre_act[i], &d);
            }
            let layer = &self.analysis[i];
            let back = conv2d_backward(
                &d,
                &layer.weight,
                &state.caches[i],
                layer.geometry(),
                ConvGrads {
                    input: i > 0,
                    weight: true,
                    center_only: false,
                },
            );
            grads[i] = (back.d_weight.expect("weight grad"), back.d_bias);
            if let Some(dx) = back.d_input {
                d = dx;
            }
        }
        grads
    }

    /// `y = g_a(x)`; the image must already be padded.
    pub fn analyze(&self, image: &ImageTensor<T>) -> Result<LatentCode<T>> {
        Ok(LatentCode::new(self.analysis_forward(image)?.latent))
    }

    /// Runs the synthesis transform. `gate_fn(k, h^k)` supplies the gate value
    /// for layer `k` given its input feature map.
    pub fn synthesis_forward<F>(
        &self,
        latent: &Tensor<T>,
        updates: &[Option<&LayerUpdate<T>>],
        mut gate_fn: F,
    ) -> Result<SynthesisState<T>>
    where
        F: FnMut(usize, &Tensor<T>) -> T,
    {
        if latent.channels != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, model expects {}",
                latent.channels, self.config.latent_channels
            )));
        }
        if !updates.is_empty() && updates.len() != ADAPTABLE_LAYERS {
            return Err(Error::Contract(format!(
                "expected {ADAPTABLE_LAYERS} layer updates, got {}",
                updates.len()
            )));
        }
        let mut inputs = Vec::with_capacity(ADAPTABLE_LAYERS);
        let mut caches = Vec::with_capacity(ADAPTABLE_LAYERS);
        let mut pre_act = Vec::with_capacity(ADAPTABLE_LAYERS - 1);
        let mut gates = Vec::with_capacity(ADAPTABLE_LAYERS);
        let mut h = latent.clone();
        for k in 0..ADAPTABLE_LAYERS {
            let update = updates.get(k).copied().flatten();
            let g = gate_fn(k, &h);
            let (z, cache) = apply_update_forward(&h, &self.synthesis[k], update, g)?;
            inputs.push(h);
            caches.push(cache);
            gates.push(g);
            if k + 1 < ADAPTABLE_LAYERS {
                h = leaky_relu(&z);
                pre_act.push(z);
            } else {
                h = z;
            }
            if self.config.shuffle_after(k) {
                h = pixel_shuffle2(&h);
            }
        }
        Ok(SynthesisState {
            inputs,
            caches,
            pre_act,
            gates,
            output: h,
        })
    }

    pub fn synthesis_backward(
        &self,
        state: &SynthesisState<T>,
        updates: &[Option<&LayerUpdate<T>>],
        d_output: &Tensor<T>,
        want_latent: bool,
        want_base: bool,
    ) -> SynthesisGrads<T> {
        count_backward();
        let mut d = pixel_unshuffle2(d_output);
        let mut d_updates = vec![Vec::new(); ADAPTABLE_LAYERS];
        let mut d_gates = vec![T::zero(); ADAPTABLE_LAYERS];
        let mut d_base = want_base.then(|| vec![(Vec::new(), Vec::new()); ADAPTABLE_LAYERS]);
        let mut d_latent = None;
        for k in (0..ADAPTABLE_LAYERS).rev() {
            if k + 1 < ADAPTABLE_LAYERS {
                if self.config.shuffle_after(k) {
                    d = pixel_unshuffle2(&d);
                }
                d = leaky_relu_backward(&state.pre_act[k], &d);
            }
            let update = updates.get(k).copied().flatten();
            let need_input = k > 0 || want_latent;
            let back = apply_update_backward(
                &d,
                &self.synthesis[k],
                update,
                state.gates[k],
                &state.caches[k],
                UpdateGrads {
                    input: need_input,
                    base: want_base,
                },
            );
            d_updates[k] = back.d_params;
            d_gates[k] = back.d_gate;
            if let Some(base) = d_base.as_mut() {
                base[k] = (back.d_weight.expect("base grad"), back.d_bias.expect("base grad"));
            }
            if let Some(dx) = back.d_input {
                if k == 0 {
                    d_latent = Some(dx);
                } else {
                    d = dx;
                }
            }
        }
        SynthesisGrads {
            d_latent,
            d_updates,
            d_gates,
            d_base,
        }
    }

    /// `x̂ = g_s(ŷ)` with optional gated layer updates, clipped to `[0, 1]`.
    pub fn synthesize(
        &self,
        latent: &LatentCode<T>,
        deltas: Option<&[Option<LayerUpdate<T>>]>,
        gates: Option<&GateVector>,
    ) -> Result<ImageTensor<T>> {
        let yhat = latent.quantized_tensor()?;
        let state = match (deltas, gates) {
            (None, None) => self.synthesis_forward(&yhat, &[], |_, _| T::one())?,
            (Some(d), Some(g)) => {
                if d.len() != ADAPTABLE_LAYERS || g.len() != ADAPTABLE_LAYERS {
                    return Err(Error::Contract(format!(
                        "deltas ({}) and gates ({}) must both have length {ADAPTABLE_LAYERS}",
                        d.len(),
                        g.len()
                    )));
                }
                let refs: Vec<Option<&LayerUpdate<T>>> = d.iter().map(|u| u.as_ref()).collect();
                self.synthesis_forward(&yhat, &refs, |k, _| if g.bits[k] { T::one() } else { T::zero() })?
            }
            (Some(_), None) => return Err(Error::Contract("deltas given without gates".into())),
            (None, Some(_)) => self.synthesis_forward(&yhat, &[], |_, _| T::one())?,
        };
        Ok(ImageTensor {
            pixels: state.output.map(|v| v.max(T::zero()).min(T::one())),
        })
    }

    /// Total bits of `ŷ` under the latent prior.
    pub fn latent_rate(&self, latent: &LatentCode<T>) -> Result<f64> {
        let q = latent
            .quantized
            .as_ref()
            .ok_or_else(|| Error::Contract("latent must be quantized".into()))?;
        Ok(self.prior.rate_bits(q, latent.values.plane()))
    }

    /// Flattened parameter vector in a fixed order (analysis, synthesis, prior).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in self.analysis.iter().chain(&self.synthesis) {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.prior.loc);
        out.extend_from_slice(&self.prior.log_scale);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        let mut at = 0;
        let mut take = |dst: &mut [T]| {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        };
        for l in self.analysis.iter_mut().chain(self.synthesis.iter_mut()) {
            take(&mut l.weight);
            take(&mut l.bias);
        }
        take(&mut self.prior.loc);
        take(&mut self.prior.log_scale);
        assert_eq!(at, flat.len(), "parameter vector length");
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CodecModel<U> {
        let conv = |l: &ConvLayer<T>| ConvLayer {
            shape: l.shape,
            stride: l.stride,
            weight: l.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        CodecModel {
            config: self.config,
            lambda: self.lambda,
            analysis: self.analysis.iter().map(conv).collect(),
            synthesis: self.synthesis.iter().map(conv).collect(),
            prior: LatentPrior {
                loc: self.prior.loc.iter().map(|v| U::lit(v.as_f64())).collect(),
                log_scale: self.prior.log_scale.iter().map(|v| U::lit(v.as_f64())).collect(),
            },
        }
    }

    /// Identity of the base model: the first 8 bytes of the SHA-256 of its checkpoint.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let bytes = write_checkpoint(self);
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// MSE between clamped reconstruction and target, with the straight-through
/// gradient of the clamp.
pub fn clamped_mse<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    let n = T::lit(output.len() as f64);
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(output.len());
    let two = T::lit(2.0);
    for (&o, &t) in output.data.iter().zip(&target.data) {
        let e = o.max(T::zero()).min(T::one()) - t;
        sum += e * e;
        grad.push(two * e / n);
    }
    (
        sum / n,
        Tensor::from_vec(output.channels, output.height, output.width, grad),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::make_low_rank;

    fn gray(h: usize, w: usize, v: f64) -> ImageTensor<f64> {
        ImageTensor::new(Tensor::from_vec(3, h, w, vec![v; 3 * h * w])).unwrap()
    }

    fn textured(h: usize, w: usize) -> ImageTensor<f32> {
        let data = (0..3 * h * w).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
        ImageTensor::new(Tensor::from_vec(3, h, w, data)).unwrap()
    }

    #[test]
    fn latent_shape() {
        let m = CodecModel::<f64>::new(CodecConfig::default(), 1).unwrap();
        let y = m.analyze(&gray(64, 64, 0.3)).unwrap();
        assert_eq!((y.values.channels, y.values.height, y.values.width), (32, 8, 8));
        let m16 = CodecModel::<f64>::new(
            CodecConfig {
                downsampling: 16,
                ..CodecConfig::default()
            },
            1,
        )
        .unwrap();
        let y16 = m16.analyze(&gray(64, 32, 0.3)).unwrap().quantized();
        assert_eq!((y16.values.height, y16.values.width), (4, 2));
        assert_eq!(m16.synthesize(&y16, None, None).unwrap().height(), 64);
    }

    #[test]
    fn analysis_is_deterministic() {
        let m = CodecModel::<f32>::new(CodecConfig::default(), 2).unwrap();
        let z = ImageTensor::new(Tensor::zeros(3, 16, 16)).unwrap();
        assert_eq!(m.analyze(&z).unwrap(), m.analyze(&z).unwrap());
    }

    #[test]
    fn unpadded_image_rejected() {
        let m = CodecModel::<f64>::new(CodecConfig::default(), 1).unwrap();
        assert!(matches!(m.analyze(&gray(65, 63, 0.5)), Err(Error::Shape(_))));
        let padded = gray(65, 63, 0.5).pad_to_multiple(8);
        let y = m.analyze(&padded).unwrap().quantized();
        let x = m.synthesize(&y, None, None).unwrap().crop(65, 63).unwrap();
        assert_eq!((x.height(), x.width()), (65, 63));
    }

    #[test]
    fn zero_delta_and_closed_gates_match_base_decode() {
        let m = CodecModel::<f32>::new(CodecConfig::default(), 3).unwrap();
        let y = m.analyze(&textured(32, 32)).unwrap().quantized();
        let base = m.synthesize(&y, None, None).unwrap();
        let fresh: Vec<Option<LayerUpdate<f32>>> = (0..4)
            .map(|k| Some(make_low_rank(m.layer_shape(k), 2, k, 10 + k as u64).unwrap()))
            .collect();
        let open = GateVector::from_bits(vec![true; 4]);
        assert_eq!(m.synthesize(&y, Some(&fresh), Some(&open)).unwrap(), base);

        let nonzero: Vec<Option<LayerUpdate<f32>>> = fresh
            .iter()
            .map(|u| u.as_ref().map(|u| u.with_params(vec![0.05; u.param_count()])))
            .collect();
        let closed = GateVector::from_bits(vec![false; 4]);
        assert_eq!(m.synthesize(&y, Some(&nonzero), Some(&closed)).unwrap(), base);
        let first = GateVector::from_bits(vec![true, false, false, false]);
        assert_ne!(m.synthesize(&y, Some(&nonzero), Some(&first)).unwrap(), base);
    }

    #[test]
    fn mismatched_deltas_rejected() {
        let m = CodecModel::<f32>::new(CodecConfig::default(), 3).unwrap();
        let y = m.analyze(&textured(16, 16)).unwrap().quantized();
        let d: Vec<Option<LayerUpdate<f32>>> = vec![None; 4];
        let g = GateVector::from_bits(vec![true; 3]);
        assert!(matches!(m.synthesize(&y, Some(&d), Some(&g)), Err(Error::Contract(_))));
        assert!(matches!(m.synthesize(&y, Some(&d), None), Err(Error::Contract(_))));
        let unq = m.analyze(&textured(16, 16)).unwrap();
        assert!(m.synthesize(&unq, None, None).is_err());
    }

    #[test]
    fn latent_rate_is_additive_and_permutation_invariant() {
        let m = CodecModel::<f64>::new(CodecConfig::default(), 4).unwrap();
        let c = 32;
        let plane = 16;
        let symbols: Vec<i32> = (0..c * plane).map(|i| ((i * 31) % 7) as i32 - 3).collect();
        let small = LatentCode::<f64>::from_symbols(c, 4, 4, symbols.clone());
        let mut doubled = Vec::new();
        for ch in 0..c {
            let row = &symbols[ch * plane..(ch + 1) * plane];
            doubled.extend_from_slice(row);
            doubled.extend_from_slice(row);
        }
        let big = LatentCode::<f64>::from_symbols(c, 8, 4, doubled);
        let a = m.latent_rate(&small).unwrap();
        let b = m.latent_rate(&big).unwrap();
        assert!((b / a - 2.0).abs() < 1e-3);
        let mut permuted = symbols.clone();
        permuted[..plane].reverse();
        let p = LatentCode::<f64>::from_symbols(c, 4, 4, permuted);
        assert!((m.latent_rate(&p).unwrap() - a).abs() < 1e-9);
    }

    #[test]
    fn synthesis_latent_gradient_matches_finite_differences() {
        let m = CodecModel::<f64>::new(CodecConfig::default(), 5).unwrap();
        let y = Tensor::from_vec(32, 2, 2, (0..128).map(|i| ((i % 9) as f64 - 4.0) * 0.3).collect());
        let st = m.synthesis_forward(&y, &[], |_, _| 1.0).unwrap();
        let probe = Tensor::from_vec(3, 16, 16, (0..768).map(|i| ((i % 13) as f64 - 6.0) * 0.01).collect());
        let g = m.synthesis_backward(&st, &[], &probe, true, true);
        let dl = g.d_latent.unwrap();
        let f = |y: &Tensor<f64>| m.synthesis_forward(y, &[], |_, _| 1.0).unwrap().output.dot(&probe);
        for i in [0, 17, 64, 127] {
            let mut yp = y.clone();
            yp.data[i] += 1e-5;
            let up = f(&yp);
            yp.data[i] -= 2e-5;
            let dn = f(&yp);
            assert!(((up - dn) / 2e-5 - dl.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn cast_round_trip() {
        let m = CodecModel::<f32>::new(CodecConfig::default(), 6).unwrap();
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
