//! Per-image adaptation: latent refinement followed by gated decoder
//! adaptation, and the end-to-end encoder built on both.
//!
//! Phase 1 optimizes the latent `y` with the decoder frozen. Phase 2 freezes
//! `ŷ` and optimizes one update per adaptable layer together with the gate
//! networks under
//! `R(ŷ) + Σ g_k·R(Δθ̂_k) + λ·255²·MSE`, rates normalized per pixel.
//! Distortion sees straight-through quantized update parameters; the update
//! rate uses the uniform-noise proxy.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, LayerUpdate};
use crate::bitstream::{pack, CompressedBlob, PackRequest};
use crate::codec::{clamped_mse, CodecModel, LatentCode, ADAPTABLE_LAYERS, DISTORTION_SCALE};
use crate::delta_prior::{noisy_delta_rate, quantize_delta, DeltaPriorConfig, QuantizedDelta};
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::gate::{warmup_override, GateCache, GateNetwork, GateVector};
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How gate bits are chosen during decoder adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Learned per-layer gate networks.
    Dynamic,
    /// The first `m` layers always open, the rest closed.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Latent refinement steps `N₁`.
    pub n1: usize,
    /// Decoder adaptation steps `N₂`.
    pub n2: usize,
    /// Warmup steps `N_w` with every gate forced open.
    pub warmup: usize,
    pub rank: usize,
    /// Defaults to the λ the base model was trained with.
    pub lambda: Option<f64>,
    pub lr_latent: f64,
    pub lr_delta: f64,
    pub lr_gate: f64,
    pub seed: u64,
    pub variant: AdapterKind,
    pub gate_mode: GateMode,
    pub prior: DeltaPriorConfig,
    /// In dynamic mode, close every gate when the adapted result costs more
    /// than the unadapted decode.
    pub fallback: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            n1: 200,
            n2: 200,
            warmup: 20,
            rank: 2,
            lambda: None,
            lr_latent: 1e-3,
            lr_delta: 1e-3,
            lr_gate: 1e-5,
            seed: 0,
            variant: AdapterKind::LowRank,
            gate_mode: GateMode::Dynamic,
            prior: DeltaPriorConfig::default(),
            fallback: true,
        }
    }
}

impl AdaptationConfig {
    /// No refinement and no decoder adaptation: the plain base codec.
    pub fn zero() -> Self {
        Self {
            n1: 0,
            n2: 0,
            warmup: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.n2 {
            return Err(Error::Contract(format!(
                "warmup {} exceeds decoder steps {}",
                self.warmup, self.n2
            )));
        }
        for (name, lr) in [
            ("lr_latent", self.lr_latent),
            ("lr_delta", self.lr_delta),
            ("lr_gate", self.lr_gate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Contract(format!("{name} must be > 0, got {lr}")));
            }
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Contract(format!("lambda must be > 0, got {l}")));
            }
        }
        if let GateMode::Fixed(m) = self.gate_mode {
            if m > ADAPTABLE_LAYERS {
                return Err(Error::Contract(format!("fixed layer count {m} exceeds {ADAPTABLE_LAYERS}")));
            }
        }
        self.prior.validate()
    }

    fn resolve_lambda<T: Scalar>(&self, model: &CodecModel<T>) -> Result<f64> {
        let l = self.lambda.unwrap_or(model.lambda);
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Contract(format!("adaptation needs lambda > 0, got {l}")));
        }
        Ok(l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Latent,
    Decoder,
    /// Snapshot of what is transmitted.
    Final,
}

/// One row of the loss trace. Rates are hard-quantized bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub rate_latent_bits: f64,
    pub rate_model_bits: f64,
    pub mse: f64,
    pub gates_open_count: usize,
    pub phase: Phase,
}

impl TraceRow {
    /// `(R(ŷ) + R(Δθ̂))/pixels + λ·255²·MSE`.
    pub fn loss(&self, lambda: f64, pixels: usize) -> f64 {
        (self.rate_latent_bits + self.rate_model_bits) / pixels as f64 + lambda * DISTORTION_SCALE * self.mse
    }
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Refinement<T> {
    /// Best unquantized latent found.
    pub latent: LatentCode<T>,
    pub trace: Vec<TraceRow>,
}

fn quantize_ste<T: Scalar>(y: &Tensor<T>) -> (Vec<i32>, Tensor<T>) {
    let q: Vec<i32> = y.data.iter().map(|&v| crate::codec::quantize_latent_value(v)).collect();
    let t = Tensor::from_vec(y.channels, y.height, y.width, q.iter().map(|&v| T::lit(v as f64)).collect());
    (q, t)
}

/// Refines `y = g_a(x)` for `N₁` steps with the decoder frozen and returns
/// the iterate with the lowest quantized RD loss (the start included).
pub fn refine_latent<T: Scalar>(
    image: &ImageTensor<T>,
    model: &CodecModel<T>,
    config: &AdaptationConfig,
) -> Result<Refinement<T>> {
    config.validate()?;
    let y0 = model.analyze(image)?;
    if config.n1 == 0 {
        return Ok(Refinement {
            latent: y0,
            trace: Vec::new(),
        });
    }
    let lambda = config.resolve_lambda(model)?;
    let pixels = image.height() * image.width();
    let inv_p = T::lit(1.0 / pixels as f64);
    let dscale = T::lit(lambda * DISTORTION_SCALE);
    let mut y = y0.values;
    let mut opt = Adam::new(config.lr_latent, y.len());
    let mut best: Option<(f64, Tensor<T>)> = None;
    let mut trace = Vec::with_capacity(config.n1 + 1);
    for step in 0..=config.n1 {
        let (_, yhat) = quantize_ste(&y);
        let rate = model.prior.rate_with_grad(&yhat.data, yhat.plane(), false);
        let state = model.synthesis_forward(&yhat, &[], |_, _| T::one())?;
        let (mse, d_out) = clamped_mse(&state.output, &image.pixels);
        let row = TraceRow {
            step,
            rate_latent_bits: rate.bits.as_f64(),
            rate_model_bits: 0.0,
            mse: mse.as_f64(),
            gates_open_count: 0,
            phase: Phase::Latent,
        };
        let loss = row.loss(lambda, pixels);
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step,
                detail: format!("latent refinement loss {loss}"),
            });
        }
        trace.push(row);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, y.clone()));
        }
        if step == config.n1 {
            break;
        }
        let d_out = d_out.map(|v| v * dscale);
        let back = model.synthesis_backward(&state, &[], &d_out, true, false);
        let mut grad = back.d_latent.expect("latent grad").data;
        for (g, &r) in grad.iter_mut().zip(&rate.d_symbols) {
            *g += r * inv_p;
        }
        opt.step(&mut y.data, &grad);
    }
    let (_, best) = best.expect("at least one step");
    Ok(Refinement {
        latent: LatentCode::new(best),
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptationResult<T> {
    /// Quantized latent that is transmitted.
    pub refined_latent: LatentCode<T>,
    /// Transmitted updates; `Some` exactly for open gates.
    pub deltas: Vec<Option<QuantizedDelta>>,
    /// Dequantized updates as the decoder will apply them.
    pub updates: Vec<Option<LayerUpdate<T>>>,
    pub gate_bits: GateVector,
    pub loss_trace: Vec<TraceRow>,
    pub variant: AdapterKind,
    pub rank: usize,
    pub lambda: f64,
}

impl<T: Scalar> AdaptationResult<T> {
    /// Estimated bits of both streams.
    pub fn estimated_bits(&self, model: &CodecModel<T>) -> Result<f64> {
        let model_bits: f64 = self.deltas.iter().flatten().map(|d| d.rate_bits()).sum();
        Ok(model.latent_rate(&self.refined_latent)? + model_bits)
    }

    /// Server-side decode of the padded image.
    pub fn reconstruct(&self, model: &CodecModel<T>) -> Result<ImageTensor<T>> {
        model.synthesize(&self.refined_latent, Some(&self.updates), Some(&self.gate_bits))
    }
}

fn layer_seed(seed: u64, k: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt ^ (k as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn fresh_updates<T: Scalar>(model: &CodecModel<T>, config: &AdaptationConfig) -> Result<Vec<LayerUpdate<T>>> {
    (0..ADAPTABLE_LAYERS)
        .map(|k| {
            let layer = &model.synthesis[k];
            LayerUpdate::new(
                config.variant,
                layer.shape,
                config.rank,
                k,
                layer_seed(config.seed, k, 0xde17a),
                Some(&layer.weight),
            )
        })
        .collect()
}

struct Snapshot<T> {
    quantized: Vec<QuantizedDelta>,
    dequantized: Vec<LayerUpdate<T>>,
}

fn snapshot<T: Scalar>(updates: &[LayerUpdate<T>], prior: &DeltaPriorConfig) -> Snapshot<T> {
    let quantized: Vec<QuantizedDelta> = updates.iter().map(|u| quantize_delta(&u.params, prior)).collect();
    let dequantized = updates
        .iter()
        .zip(&quantized)
        .map(|(u, q)| u.with_params(q.dequantize()))
        .collect();
    Snapshot { quantized, dequantized }
}

/// Gate values for one forward pass: forced (warmup / fixed mode) or from
/// the gate networks on the detached layer inputs.
fn gated_forward<T: Scalar>(
    model: &CodecModel<T>,
    yhat: &Tensor<T>,
    updates: &[LayerUpdate<T>],
    forced: Option<&GateVector>,
    gates: &[GateNetwork<T>],
) -> Result<(crate::codec::SynthesisState<T>, Vec<Option<GateCache<T>>>, Vec<f64>)> {
    let refs: Vec<Option<&LayerUpdate<T>>> = updates.iter().map(Some).collect();
    let mut caches: Vec<Option<GateCache<T>>> = (0..ADAPTABLE_LAYERS).map(|_| None).collect();
    let mut soft = vec![1.0; ADAPTABLE_LAYERS];
    let mut failure = None;
    let state = model.synthesis_forward(yhat, &refs, |k, h| match forced {
        Some(mask) => {
            soft[k] = if mask.bits[k] { 1.0 } else { 0.0 };
            if mask.bits[k] {
                T::one()
            } else {
                T::zero()
            }
        }
        None => match gates[k].forward(h) {
            Ok((st, cache)) => {
                soft[k] = st.soft.as_f64();
                caches[k] = Some(cache);
                st.value
            }
            Err(e) => {
                failure = Some(e);
                T::zero()
            }
        },
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((state, caches, soft))
}

/// Optimizes per-layer updates and gates for a frozen quantized latent.
pub fn adapt_decoder<T: Scalar>(
    latent: &LatentCode<T>,
    image: &ImageTensor<T>,
    model: &CodecModel<T>,
    config: &AdaptationConfig,
) -> Result<AdaptationResult<T>> {
    config.validate()?;
    let lambda = config.resolve_lambda(model)?;
    let yhat = latent.quantized_tensor()?;
    let rate_latent = model.latent_rate(latent)?;
    let pixels = image.height() * image.width();
    let inv_p = T::lit(1.0 / pixels as f64);
    let dscale = T::lit(lambda * DISTORTION_SCALE);
    let mut trace = Vec::with_capacity(config.n2 + 1);

    let base_mse = {
        let state = model.synthesis_forward(&yhat, &[], |_, _| T::one())?;
        clamped_mse(&state.output, &image.pixels).0.as_f64()
    };
    let closed = |trace: Vec<TraceRow>, step: usize| AdaptationResult {
        refined_latent: latent.clone(),
        deltas: vec![None; ADAPTABLE_LAYERS],
        updates: vec![None; ADAPTABLE_LAYERS],
        gate_bits: GateVector::all(ADAPTABLE_LAYERS, false),
        loss_trace: {
            let mut t = trace;
            t.push(TraceRow {
                step,
                rate_latent_bits: rate_latent,
                rate_model_bits: 0.0,
                mse: base_mse,
                gates_open_count: 0,
                phase: Phase::Final,
            });
            t
        },
        variant: config.variant,
        rank: config.rank,
        lambda,
    };
    if config.n2 == 0 || config.gate_mode == GateMode::Fixed(0) {
        return Ok(closed(trace, config.n2));
    }

    let mut updates = fresh_updates(model, config)?;
    let mut delta_opt: Vec<Adam<T>> = updates.iter().map(|u| Adam::new(config.lr_delta, u.param_count())).collect();
    let dynamic = config.gate_mode == GateMode::Dynamic;
    let mut gates: Vec<GateNetwork<T>> = (0..ADAPTABLE_LAYERS)
        .map(|k| GateNetwork::new(model.layer_shape(k).c_in, k, layer_seed(config.seed, k, 0x9a7e)))
        .collect();
    let mut gate_opt: Vec<Adam<T>> = gates.iter().map(|g| Adam::new(config.lr_gate, g.param_count())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(config.seed, 0, 0x0153));
    let all_open = GateVector::all(ADAPTABLE_LAYERS, true);
    let fixed_mask = match config.gate_mode {
        GateMode::Fixed(m) => GateVector::first(ADAPTABLE_LAYERS, m),
        GateMode::Dynamic => all_open.clone(),
    };
    let forced_at = |n: usize| -> Option<&GateVector> {
        if !dynamic {
            Some(&fixed_mask)
        } else if warmup_override(n, config.warmup) {
            Some(&all_open)
        } else {
            None
        }
    };

    for n in 1..=config.n2 {
        let snap = snapshot(&updates, &config.prior);
        let forced = forced_at(n);
        let (state, caches, _) = gated_forward(model, &yhat, &snap.dequantized, forced, &gates)?;
        let (mse, d_out) = clamped_mse(&state.output, &image.pixels);
        let open: Vec<bool> = state.gates.iter().map(|&g| g == T::one()).collect();
        let rate_model: f64 = snap
            .quantized
            .iter()
            .zip(&open)
            .filter(|(_, &o)| o)
            .map(|(q, _)| q.rate_bits())
            .sum();
        let row = TraceRow {
            step: n,
            rate_latent_bits: rate_latent,
            rate_model_bits: rate_model,
            mse: mse.as_f64(),
            gates_open_count: open.iter().filter(|&&o| o).count(),
            phase: Phase::Decoder,
        };
        let loss = row.loss(lambda, pixels);
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: n,
                detail: format!("decoder adaptation loss {loss}"),
            });
        }
        trace.push(row);

        let d_out = d_out.map(|v| v * dscale);
        let refs: Vec<Option<&LayerUpdate<T>>> = snap.dequantized.iter().map(Some).collect();
        let back = model.synthesis_backward(&state, &refs, &d_out, false, false);
        for k in 0..ADAPTABLE_LAYERS {
            let g = state.gates[k];
            let (bits, rate_grad) = noisy_delta_rate(&updates[k].params, &config.prior, &mut rng);
            let mut grad = back.d_updates[k].clone();
            for (d, &r) in grad.iter_mut().zip(&rate_grad) {
                *d += g * r * inv_p;
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: n,
                    detail: format!("non-finite update gradient on layer {k}"),
                });
            }
            delta_opt[k].step(&mut updates[k].params, &grad);
            if let Some(cache) = caches[k].as_ref() {
                let d_gate = back.d_gates[k] + bits * inv_p;
                let grad = gates[k].backward(cache, d_gate);
                let mut p = gates[k].flat_params();
                gate_opt[k].step(&mut p, &grad);
                gates[k].set_flat_params(&p);
            }
        }
    }

    // The transmitted state: final quantized updates and the gate decisions
    // of one more forward pass with them.
    let snap = snapshot(&updates, &config.prior);
    let (state, _, soft) = gated_forward(model, &yhat, &snap.dequantized, forced_at(config.n2), &gates)?;
    let (mse, _) = clamped_mse(&state.output, &image.pixels);
    let bits: Vec<bool> = state.gates.iter().map(|&g| g == T::one()).collect();
    let rate_model: f64 = snap
        .quantized
        .iter()
        .zip(&bits)
        .filter(|(_, &o)| o)
        .map(|(q, _)| q.rate_bits())
        .sum();
    let row = TraceRow {
        step: config.n2,
        rate_latent_bits: rate_latent,
        rate_model_bits: rate_model,
        mse: mse.as_f64(),
        gates_open_count: bits.iter().filter(|&&o| o).count(),
        phase: Phase::Final,
    };
    let base_row = TraceRow {
        rate_model_bits: 0.0,
        mse: base_mse,
        gates_open_count: 0,
        ..row
    };
    if !bits.iter().any(|&b| b)
        || (dynamic && config.fallback && row.loss(lambda, pixels) > base_row.loss(lambda, pixels))
    {
        return Ok(closed(trace, config.n2));
    }
    trace.push(row);
    let mut deltas = vec![None; ADAPTABLE_LAYERS];
    let mut applied = vec![None; ADAPTABLE_LAYERS];
    for (k, (q, u)) in snap.quantized.into_iter().zip(snap.dequantized).enumerate() {
        if bits[k] {
            deltas[k] = Some(q);
            applied[k] = Some(u);
        }
    }
    let gate_bits = if dynamic {
        GateVector {
            bits,
            soft: Some(soft),
        }
    } else {
        GateVector::from_bits(bits)
    };
    Ok(AdaptationResult {
        refined_latent: latent.clone(),
        deltas,
        updates: applied,
        gate_bits,
        loss_trace: trace,
        variant: config.variant,
        rank: config.rank,
        lambda,
    })
}

/// Encoder output together with the server-side simulation of the decode.
#[derive(Clone, Debug)]
pub struct EncodeOutput<T> {
    pub blob: CompressedBlob,
    pub result: AdaptationResult<T>,
    /// Server-side reconstruction cropped to the original size.
    pub reconstruction: ImageTensor<T>,
    pub psnr: f64,
    pub bpp: f64,
}

/// Refine, adapt and pack one image of any size.
pub fn end_to_end_encode<T: Scalar>(
    image: &ImageTensor<T>,
    model: &CodecModel<T>,
    config: &AdaptationConfig,
) -> Result<EncodeOutput<T>> {
    config.validate()?;
    let padded = image.pad_to_multiple(model.downsampling());
    let refined = refine_latent(&padded, model, config)?;
    let latent = refined.latent.quantized();
    let mut result = adapt_decoder(&latent, &padded, model, config)?;
    let mut trace = refined.trace;
    trace.append(&mut result.loss_trace);
    result.loss_trace = trace;
    let blob = pack(
        model,
        &PackRequest {
            latent: &result.refined_latent,
            deltas: &result.deltas,
            gates: &result.gate_bits,
            variant: config.variant,
            rank: config.rank,
            prior: config.prior,
            height: image.height(),
            width: image.width(),
            cluster: None,
        },
    )?;
    let reconstruction = result.reconstruct(model)?.crop(image.height(), image.width())?;
    let psnr = psnr(image, &reconstruction)?;
    let bpp = blob.bpp();
    Ok(EncodeOutput {
        blob,
        result,
        reconstruction,
        psnr,
        bpp,
    })
}
