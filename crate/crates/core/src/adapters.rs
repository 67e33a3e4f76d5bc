//! Per-layer decoder updates.
//!
//! The primary mechanism is a rank-`r` update `ΔW = B·A` of a convolution's
//! channel-mixing matrix, written onto the centre tap of the spatial kernel.
//! Four comparison variants share the same interface: full fine-tuning,
//! bias-only, a learnable shift of singular values, and a serial bottleneck
//! adapter on the layer output.
//!
//! Every variant is gated: with gate `g = 0` the layer computes exactly its
//! base output, and the backward pass reports `∂L/∂g` so a gate network can
//! be trained through a straight-through estimator.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, dot, gemm_nn, gemm_nt, gemm_tn, ConvCache, ConvGeometry, ConvGrads, Tensor};

/// Standard deviation of the Gaussian used for `A` at creation.
pub const LOW_RANK_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    LowRank,
    FineTune,
    BiasOnly,
    SvdDelta,
    SerialAdapter,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::LowRank,
        AdapterKind::FineTune,
        AdapterKind::BiasOnly,
        AdapterKind::SvdDelta,
        AdapterKind::SerialAdapter,
    ];

    pub fn code(self) -> u8 {
        match self {
            AdapterKind::LowRank => 0,
            AdapterKind::FineTune => 1,
            AdapterKind::BiasOnly => 2,
            AdapterKind::SvdDelta => 3,
            AdapterKind::SerialAdapter => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown adapter kind {code}")))
    }

    pub fn uses_rank(self) -> bool {
        matches!(self, AdapterKind::LowRank | AdapterKind::SerialAdapter)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::LowRank => "low_rank",
            AdapterKind::FineTune => "fine_tune",
            AdapterKind::BiasOnly => "bias_only",
            AdapterKind::SvdDelta => "svd",
            AdapterKind::SerialAdapter => "adapter",
        }
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_rank" | "lowrank" => Ok(AdapterKind::LowRank),
            "fine_tune" | "finetune" => Ok(AdapterKind::FineTune),
            "bias_only" | "bias" => Ok(AdapterKind::BiasOnly),
            "svd" | "svd_delta" => Ok(AdapterKind::SvdDelta),
            "adapter" | "serial_adapter" => Ok(AdapterKind::SerialAdapter),
            other => Err(Error::Contract(format!("unknown variant '{other}'"))),
        }
    }
}

/// `(c_out, c_in, k_h, k_w)` of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
}

impl LayerShape {
    pub fn new(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self { c_out, c_in, kh, kw }
    }

    pub fn inner(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.inner()
    }
}

/// Number of transmitted parameters for a variant on a layer.
pub fn count_params(kind: AdapterKind, shape: LayerShape, rank: usize) -> usize {
    match kind {
        AdapterKind::LowRank => rank * (shape.c_in + shape.c_out),
        AdapterKind::FineTune => shape.weight_len() + shape.c_out,
        AdapterKind::BiasOnly => shape.c_out,
        AdapterKind::SvdDelta => shape.c_out.min(shape.inner()),
        // The bottleneck acts on the layer output, so both factors see c_out.
        AdapterKind::SerialAdapter => rank * 2 * shape.c_out,
    }
}

/// Frozen singular-value decomposition of a flattened weight, `W = U·diag(S)·Vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdBasis<T> {
    /// `c_out × m`
    pub u: Vec<T>,
    pub s: Vec<T>,
    /// `m × inner`
    pub vt: Vec<T>,
    pub m: usize,
}

impl<T: Scalar> SvdBasis<T> {
    pub fn of(weight: &[T], shape: LayerShape) -> Self {
        let rows = shape.c_out;
        let cols = shape.inner();
        let w = DMatrix::<f64>::from_row_slice(rows, cols, &weight.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        let svd = w.svd(true, true);
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let m = rows.min(cols);
        let mut uu = Vec::with_capacity(rows * m);
        for r in 0..rows {
            for c in 0..m {
                uu.push(T::lit(u[(r, c)]));
            }
        }
        let mut vv = Vec::with_capacity(m * cols);
        for r in 0..m {
            for c in 0..cols {
                vv.push(T::lit(vt[(r, c)]));
            }
        }
        Self {
            u: uu,
            s: svd.singular_values.iter().map(|&v| T::lit(v)).collect(),
            vt: vv,
            m,
        }
    }

    /// `U·diag(d)·Vᵀ` flattened to `c_out × inner`.
    pub fn compose(&self, d: &[T], c_out: usize) -> Vec<T> {
        let inner = self.vt.len() / self.m;
        let mut scaled = self.u.clone();
        for r in 0..c_out {
            for (c, &dv) in d.iter().enumerate() {
                scaled[r * self.m + c] = scaled[r * self.m + c] * dv;
            }
        }
        let mut out = vec![T::zero(); c_out * inner];
        gemm_nn(&scaled, &self.vt, &mut out, c_out, self.m, inner);
        out
    }

    /// `uᵢᵀ·G·vᵢ` for each component.
    pub fn project(&self, g: &[T], c_out: usize) -> Vec<T> {
        let inner = self.vt.len() / self.m;
        // G·V : c_out × m
        let mut gv = vec![T::zero(); c_out * self.m];
        gemm_nt(g, &self.vt, &mut gv, c_out, inner, self.m);
        (0..self.m)
            .map(|i| (0..c_out).fold(T::zero(), |acc, r| acc + self.u[r * self.m + i] * gv[r * self.m + i]))
            .collect()
    }
}

/// A learnable update for one convolution layer.
///
/// `params` layout (row-major throughout):
/// - low rank: `A (r × c_in)` then `B (c_out × r)`
/// - serial adapter: `A (r × c_out)` then `B (c_out × r)`
/// - fine tune: `ΔW (c_out × c_in·k_h·k_w)` then `Δb (c_out)`
/// - bias only: `Δb (c_out)`
/// - svd: `ΔS (min(c_out, c_in·k_h·k_w))`
#[derive(Clone, Debug)]
pub struct LayerUpdate<T> {
    pub kind: AdapterKind,
    pub shape: LayerShape,
    pub rank: usize,
    pub layer_index: usize,
    pub params: Vec<T>,
    pub svd: Option<Arc<SvdBasis<T>>>,
}

/// Creates a fresh low-rank update with `B = 0` and Gaussian `A`.
pub fn make_low_rank<T: Scalar>(shape: LayerShape, rank: usize, layer_index: usize, seed: u64) -> Result<LayerUpdate<T>> {
    LayerUpdate::new(AdapterKind::LowRank, shape, rank, layer_index, seed, None)
}

impl<T: Scalar> LayerUpdate<T> {
    /// Fresh update of any kind. `base_weight` is required for the SVD
    /// variant, which decomposes it once.
    pub fn new(
        kind: AdapterKind,
        shape: LayerShape,
        rank: usize,
        layer_index: usize,
        seed: u64,
        base_weight: Option<&[T]>,
    ) -> Result<Self> {
        if kind.uses_rank() {
            let limit = match kind {
                AdapterKind::SerialAdapter => shape.c_out,
                _ => shape.c_in.min(shape.c_out),
            };
            if rank == 0 || rank > limit / 4 {
                return Err(Error::Contract(format!(
                    "rank {rank} must satisfy 1 <= r <= {}/4 for layer {layer_index} ({}→{})",
                    limit, shape.c_in, shape.c_out
                )));
            }
        }
        let n = count_params(kind, shape, rank);
        let mut params = vec![T::zero(); n];
        let mut svd = None;
        match kind {
            AdapterKind::LowRank | AdapterKind::SerialAdapter => {
                let a_len = n - shape.c_out * rank;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, LOW_RANK_INIT_STD).expect("valid std");
                for p in params.iter_mut().take(a_len) {
                    *p = T::lit(normal.sample(&mut rng));
                }
            }
            AdapterKind::SvdDelta => {
                let w = base_weight.ok_or_else(|| Error::Contract("svd variant needs the base weight".into()))?;
                if w.len() != shape.weight_len() {
                    return Err(Error::Shape("svd base weight length".into()));
                }
                svd = Some(Arc::new(SvdBasis::of(w, shape)));
            }
            AdapterKind::FineTune | AdapterKind::BiasOnly => {}
        }
        Ok(Self {
            kind,
            shape,
            rank,
            layer_index,
            params,
            svd,
        })
    }

    /// Same update with a different parameter vector (e.g. dequantized values).
    pub fn with_params(&self, params: Vec<T>) -> Self {
        assert_eq!(params.len(), self.params.len());
        Self {
            params,
            ..self.clone()
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn factors(&self) -> (&[T], &[T]) {
        let a_len = self.params.len() - self.shape.c_out * self.rank;
        self.params.split_at(a_len)
    }

    /// Channel-mixing matrix `B·A` (`c_out × c_in`) for the low-rank kind.
    pub fn low_rank_product(&self) -> Vec<T> {
        debug_assert_eq!(self.kind, AdapterKind::LowRank);
        let (a, b) = self.factors();
        let mut ba = vec![T::zero(); self.shape.c_out * self.shape.c_in];
        gemm_nn(b, a, &mut ba, self.shape.c_out, self.rank, self.shape.c_in);
        ba
    }

    /// Full weight perturbation `ΔW` (before gating) in `c_out × inner` layout.
    pub fn materialize_weight_delta(&self) -> Vec<T> {
        let s = self.shape;
        let mut dw = vec![T::zero(); s.weight_len()];
        match self.kind {
            AdapterKind::LowRank => {
                let ba = self.low_rank_product();
                let tap = (s.kh / 2) * s.kw + s.kw / 2;
                let kk = s.kh * s.kw;
                for o in 0..s.c_out {
                    for i in 0..s.c_in {
                        dw[(o * s.c_in + i) * kk + tap] = ba[o * s.c_in + i];
                    }
                }
            }
            AdapterKind::FineTune => dw.copy_from_slice(&self.params[..s.weight_len()]),
            AdapterKind::SvdDelta => {
                dw = self.svd.as_ref().expect("svd basis").compose(&self.params, s.c_out);
            }
            AdapterKind::BiasOnly | AdapterKind::SerialAdapter => {}
        }
        dw
    }

    fn bias_delta(&self) -> Option<&[T]> {
        match self.kind {
            AdapterKind::BiasOnly => Some(&self.params),
            AdapterKind::FineTune => Some(&self.params[self.shape.weight_len()..]),
            _ => None,
        }
    }
}

/// Base convolution a [`LayerUpdate`] is attached to.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub shape: LayerShape,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.shape.kh,
            stride: self.stride,
        }
    }

    pub fn forward(&self, h: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        conv2d(h, &self.weight, &self.bias, self.shape.c_out, self.geometry())
    }
}

/// State kept by [`apply_update_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct UpdateCache<T> {
    conv: ConvCache<T>,
    weight: Vec<T>,
    /// Serial adapter only: layer output before the adapter, and `A·z`.
    z: Option<Tensor<T>>,
    az: Option<Vec<T>>,
}

fn check_shapes<T: Scalar>(h: &Tensor<T>, layer: &ConvLayer<T>, update: Option<&LayerUpdate<T>>) -> Result<()> {
    if h.channels != layer.shape.c_in {
        return Err(Error::Shape(format!(
            "feature map has {} channels, layer expects {}",
            h.channels, layer.shape.c_in
        )));
    }
    if let Some(u) = update {
        if u.shape != layer.shape || u.params.len() != count_params(u.kind, u.shape, u.rank) {
            return Err(Error::Contract(format!(
                "update payload for layer {} does not match its shape",
                u.layer_index
            )));
        }
    }
    Ok(())
}

/// Gated layer output; see the module docs for the per-variant formula.
pub fn apply_update<T: Scalar>(
    h: &Tensor<T>,
    layer: &ConvLayer<T>,
    update: Option<&LayerUpdate<T>>,
    gate: T,
) -> Result<Tensor<T>> {
    apply_update_forward(h, layer, update, gate).map(|(y, _)| y)
}

pub fn apply_update_forward<T: Scalar>(
    h: &Tensor<T>,
    layer: &ConvLayer<T>,
    update: Option<&LayerUpdate<T>>,
    gate: T,
) -> Result<(Tensor<T>, UpdateCache<T>)> {
    check_shapes(h, layer, update)?;
    let mut weight = layer.weight.clone();
    let mut bias = layer.bias.clone();
    if let Some(u) = update {
        if matches!(u.kind, AdapterKind::LowRank | AdapterKind::FineTune | AdapterKind::SvdDelta) {
            for (w, d) in weight.iter_mut().zip(u.materialize_weight_delta()) {
                *w = *w + gate * d;
            }
        }
        if let Some(db) = u.bias_delta() {
            for (b, &d) in bias.iter_mut().zip(db) {
                *b = *b + gate * d;
            }
        }
    }
    let (z, conv) = conv2d(h, &weight, &bias, layer.shape.c_out, layer.geometry());
    match update {
        Some(u) if u.kind == AdapterKind::SerialAdapter => {
            let (a, b) = u.factors();
            let positions = z.plane();
            let mut az = vec![T::zero(); u.rank * positions];
            gemm_nn(a, &z.data, &mut az, u.rank, layer.shape.c_out, positions);
            let mut baz = vec![T::zero(); layer.shape.c_out * positions];
            gemm_nn(b, &az, &mut baz, layer.shape.c_out, u.rank, positions);
            let mut y = z.clone();
            for (o, &p) in y.data.iter_mut().zip(&baz) {
                *o = *o + gate * p;
            }
            Ok((
                y,
                UpdateCache {
                    conv,
                    weight,
                    z: Some(z),
                    az: Some(az),
                },
            ))
        }
        _ => Ok((
            z,
            UpdateCache {
                conv,
                weight,
                z: None,
                az: None,
            },
        )),
    }
}

/// Which gradients [`apply_update_backward`] should produce.
#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateGrads {
    pub input: bool,
    /// Gradients of the base weight and bias (training the codec itself).
    pub base: bool,
}

#[derive(Clone, Debug, Default)]
pub struct UpdateBackward<T> {
    pub d_input: Option<Tensor<T>>,
    /// Gradient for each entry of `update.params`.
    pub d_params: Vec<T>,
    /// `∂L/∂g`.
    pub d_gate: T,
    pub d_weight: Option<Vec<T>>,
    pub d_bias: Option<Vec<T>>,
}

pub fn apply_update_backward<T: Scalar>(
    dy: &Tensor<T>,
    layer: &ConvLayer<T>,
    update: Option<&LayerUpdate<T>>,
    gate: T,
    cache: &UpdateCache<T>,
    want: UpdateGrads,
) -> UpdateBackward<T> {
    let s = layer.shape;
    let mut d_gate = T::zero();
    let mut d_params = Vec::new();

    // Serial adapter sits after the convolution.
    let mut serial_grads = None;
    let dz = match (update, &cache.z, &cache.az) {
        (Some(u), Some(z), Some(az)) if u.kind == AdapterKind::SerialAdapter => {
            let (a, b) = u.factors();
            let positions = z.plane();
            let r = u.rank;
            let mut baz = vec![T::zero(); s.c_out * positions];
            gemm_nn(b, az, &mut baz, s.c_out, r, positions);
            d_gate = dot(&dy.data, &baz);
            // dB = g·dy·(Az)ᵀ
            let mut d_b = vec![T::zero(); s.c_out * r];
            gemm_nt(&dy.data, az, &mut d_b, s.c_out, positions, r);
            // d(Az) = g·Bᵀ·dy
            let mut d_az = vec![T::zero(); r * positions];
            gemm_tn(b, &dy.data, &mut d_az, r, s.c_out, positions);
            for v in d_az.iter_mut() {
                *v = *v * gate;
            }
            let mut d_a = vec![T::zero(); r * s.c_out];
            gemm_nt(&d_az, &z.data, &mut d_a, r, positions, s.c_out);
            let mut dz = dy.clone();
            gemm_tn(a, &d_az, &mut dz.data, s.c_out, r, positions);
            serial_grads = Some((d_a, d_b.into_iter().map(|v| v * gate).collect::<Vec<_>>()));
            dz
        }
        _ => dy.clone(),
    };

    let kind = update.map(|u| u.kind);
    let need_full = want.base || matches!(kind, Some(AdapterKind::FineTune | AdapterKind::SvdDelta));
    let need_center = kind == Some(AdapterKind::LowRank) && !need_full;
    let conv = conv2d_backward(
        &dz,
        &cache.weight,
        &cache.conv,
        layer.geometry(),
        ConvGrads {
            input: want.input,
            weight: need_full || need_center,
            center_only: need_center,
        },
    );

    if let Some(u) = update {
        match u.kind {
            AdapterKind::LowRank => {
                let g_center = match (&conv.d_center, &conv.d_weight) {
                    (Some(c), _) => c.clone(),
                    (None, Some(full)) => {
                        let kk = s.kh * s.kw;
                        let tap = (s.kh / 2) * s.kw + s.kw / 2;
                        (0..s.c_out * s.c_in).map(|i| full[i * kk + tap]).collect()
                    }
                    _ => unreachable!("weight gradient requested"),
                };
                let (a, b) = u.factors();
                let r = u.rank;
                d_gate = dot(&g_center, &u.low_rank_product());
                // dA = g·Bᵀ·G, dB = g·G·Aᵀ
                let mut d_a = vec![T::zero(); r * s.c_in];
                gemm_tn(b, &g_center, &mut d_a, r, s.c_out, s.c_in);
                let mut d_b = vec![T::zero(); s.c_out * r];
                gemm_nt(&g_center, a, &mut d_b, s.c_out, s.c_in, r);
                d_params = d_a.into_iter().chain(d_b).map(|v| v * gate).collect();
            }
            AdapterKind::FineTune => {
                let dw = conv.d_weight.as_ref().expect("full weight gradient");
                let (pw, pb) = u.params.split_at(s.weight_len());
                d_gate = dot(dw, pw) + dot(&conv.d_bias, pb);
                d_params = dw.iter().chain(&conv.d_bias).map(|&v| v * gate).collect();
            }
            AdapterKind::BiasOnly => {
                d_gate = dot(&conv.d_bias, &u.params);
                d_params = conv.d_bias.iter().map(|&v| v * gate).collect();
            }
            AdapterKind::SvdDelta => {
                let dw = conv.d_weight.as_ref().expect("full weight gradient");
                let proj = u.svd.as_ref().expect("svd basis").project(dw, s.c_out);
                d_gate = dot(&proj, &u.params);
                d_params = proj.into_iter().map(|v| v * gate).collect();
            }
            AdapterKind::SerialAdapter => {
                let (d_a, d_b) = serial_grads.expect("serial cache");
                d_params = d_a.into_iter().chain(d_b).collect();
            }
        }
    }

    let (d_weight, d_bias) = if want.base {
        (conv.d_weight.clone(), Some(conv.d_bias.clone()))
    } else {
        (None, None)
    };
    UpdateBackward {
        d_input: conv.d_input,
        d_params,
        d_gate,
        d_weight,
        d_bias,
    }
}
