//! Evaluation harness: metrics, RD curves, BD-rate, gate statistics,
//! steps sweeps and fixed-vs-dynamic layer comparisons.
//!
//! Every analysis first produces raw per-image [`RdRecord`]s; curves and
//! tables are pure functions of those records, so they can be rebuilt from
//! the raw CSV.

pub mod datasets;
mod metrics;
mod plot;

use std::io::{Read, Write};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub use metrics::{bd_rate, bpp, psnr, RDCurve, RDPoint, PSNR_CAP};
pub use plot::{bar_plot_svg, rd_plot_svg};

use crate::adapt::{adapt_decoder, refine_latent, AdaptationConfig, AdaptationResult, GateMode};
use crate::bitstream::{pack, PackRequest};
use crate::codec::CodecModel;
use crate::error::{Error, Result};
use crate::gate::GateVector;
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// One encoded image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRecord {
    pub method: String,
    pub lambda: f64,
    pub image: usize,
    pub bpp: f64,
    pub psnr_db: f64,
    /// Model-estimated bits of both streams plus the exact header bits.
    pub estimated_bits: f64,
    pub measured_bits: u64,
    /// Gate bits as a `0`/`1` string, layer 1 first.
    pub gates: String,
    pub seconds: f64,
}

pub fn write_csv<S: Serialize, W: Write>(rows: &[S], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<S: DeserializeOwned, R: Read>(input: R) -> Result<Vec<S>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// One curve per method (in order of first appearance), one point per λ:
/// mean bpp and mean PSNR over the images.
pub fn curves_from_records(records: &[RdRecord]) -> Result<Vec<RDCurve>> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let mut lambdas: Vec<f64> = Vec::new();
            for r in records.iter().filter(|r| r.method == m) {
                if !lambdas.contains(&r.lambda) {
                    lambdas.push(r.lambda);
                }
            }
            let points = lambdas
                .into_iter()
                .map(|l| {
                    let rs: Vec<&RdRecord> = records.iter().filter(|r| r.method == m && r.lambda == l).collect();
                    let n = rs.len() as f64;
                    RDPoint {
                        bpp: rs.iter().map(|r| r.bpp).sum::<f64>() / n,
                        psnr_db: rs.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                        label: format!("lambda={l}"),
                    }
                })
                .collect();
            RDCurve::new(m, points)
        })
        .collect()
}

pub fn curve<'a>(curves: &'a [RDCurve], method: &str) -> Result<&'a RDCurve> {
    curves
        .iter()
        .find(|c| c.method == method)
        .ok_or_else(|| Error::Contract(format!("no curve named '{method}'")))
}

/// Share of images in which each layer's gate is open.
pub fn gate_frequency_from_bits(gates: &[GateVector]) -> Result<Vec<f64>> {
    let Some(first) = gates.first() else {
        return Ok(Vec::new());
    };
    let k = first.len();
    let mut freq = vec![0.0; k];
    for g in gates {
        if g.len() != k {
            return Err(Error::Contract(format!("gate vectors of length {} and {k}", g.len())));
        }
        for (f, &b) in freq.iter_mut().zip(&g.bits) {
            if b {
                *f += 1.0;
            }
        }
    }
    Ok(freq.into_iter().map(|f| f / gates.len() as f64).collect())
}

pub fn gate_frequency<T>(results: &[AdaptationResult<T>]) -> Result<Vec<f64>> {
    let bits: Vec<GateVector> = results.iter().map(|r| GateVector::from_bits(r.gate_bits.bits.clone())).collect();
    gate_frequency_from_bits(&bits)
}

fn gate_string(g: &GateVector) -> String {
    g.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn parse_gates(s: &str) -> Result<GateVector> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Format(format!("bad gate character '{other}'"))),
        })
        .collect::<Result<Vec<_>>>()
        .map(GateVector::from_bits)
}

/// Gate frequency recomputed from raw records of one method.
pub fn gate_frequency_from_records(records: &[RdRecord], method: &str) -> Result<Vec<f64>> {
    let gates = records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| parse_gates(&r.gates))
        .collect::<Result<Vec<_>>>()?;
    gate_frequency_from_bits(&gates)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub layer: usize,
    pub frequency: f64,
}

pub fn frequency_rows(freq: &[f64]) -> Vec<FrequencyRow> {
    freq.iter()
        .enumerate()
        .map(|(k, &f)| FrequencyRow {
            layer: k + 1,
            frequency: f,
        })
        .collect()
}

/// Encodes every image with every model (one per λ) under each gate mode.
/// Latent refinement runs once per image and model and is shared by all
/// modes; its time is charged to each of them.
pub fn evaluate<T: Scalar>(
    images: &[ImageTensor<T>],
    models: &[CodecModel<T>],
    config: &AdaptationConfig,
    modes: &[(String, GateMode)],
) -> Result<Vec<RdRecord>> {
    config.validate()?;
    let mut records = Vec::with_capacity(images.len() * models.len() * modes.len());
    for model in models {
        let lambda = config.lambda.unwrap_or(model.lambda);
        for (i, image) in images.iter().enumerate() {
            let padded = image.pad_to_multiple(model.downsampling());
            let t0 = Instant::now();
            let latent = refine_latent(&padded, model, config)?.latent.quantized();
            let refine_secs = t0.elapsed().as_secs_f64();
            for (name, mode) in modes {
                let t1 = Instant::now();
                let cfg = AdaptationConfig {
                    gate_mode: *mode,
                    ..config.clone()
                };
                let result = adapt_decoder(&latent, &padded, model, &cfg)?;
                let blob = pack(
                    model,
                    &PackRequest {
                        latent: &result.refined_latent,
                        deltas: &result.deltas,
                        gates: &result.gate_bits,
                        variant: cfg.variant,
                        rank: cfg.rank,
                        prior: cfg.prior,
                        height: image.height(),
                        width: image.width(),
                        cluster: None,
                    },
                )?;
                let recon = result.reconstruct(model)?.crop(image.height(), image.width())?;
                let seconds = refine_secs + t1.elapsed().as_secs_f64();
                records.push(RdRecord {
                    method: name.clone(),
                    lambda,
                    image: i,
                    bpp: blob.bpp(),
                    psnr_db: psnr(image, &recon)?,
                    estimated_bits: result.estimated_bits(model)? + 8.0 * blob.header_len() as f64,
                    measured_bits: blob.total_bits(),
                    gates: gate_string(&result.gate_bits),
                    seconds,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub wall_seconds: f64,
    /// Against the unadapted (`steps = 0`) curve.
    pub bd_rate: f64,
}

pub fn sweep_method(steps: usize) -> String {
    format!("steps={steps}")
}

/// Adapts with `N₁ = N₂ = steps` for each grid entry (dynamic gating).
pub fn sweep_steps<T: Scalar>(
    images: &[ImageTensor<T>],
    models: &[CodecModel<T>],
    config: &AdaptationConfig,
    grid: &[usize],
) -> Result<(Vec<SweepRow>, Vec<RdRecord>)> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("step grid must be strictly ascending".into()));
    }
    let mut all = Vec::new();
    let mut full = grid.to_vec();
    if full.first() != Some(&0) {
        full.insert(0, 0);
    }
    for &s in &full {
        let cfg = AdaptationConfig {
            n1: s,
            n2: s,
            warmup: config.warmup.min(s),
            ..config.clone()
        };
        all.extend(evaluate(images, models, &cfg, &[(sweep_method(s), GateMode::Dynamic)])?);
    }
    let rows = sweep_table(&all, grid)?;
    Ok((rows, all))
}

/// Sweep table from raw records.
pub fn sweep_table(records: &[RdRecord], grid: &[usize]) -> Result<Vec<SweepRow>> {
    let curves = curves_from_records(records)?;
    let anchor = curve(&curves, &sweep_method(0))?;
    grid.iter()
        .map(|&s| {
            let m = sweep_method(s);
            Ok(SweepRow {
                steps: s,
                wall_seconds: records.iter().filter(|r| r.method == m).map(|r| r.seconds).sum(),
                bd_rate: bd_rate(curve(&curves, &m)?, anchor)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub method: String,
    /// Against the refinement-only (`m = 0`) curve.
    pub bd_rate: f64,
}

pub fn fixed_method(m: usize) -> String {
    format!("fixed-{m}")
}

pub const DYNAMIC_METHOD: &str = "dynamic";

/// Fixed first-`m` layer updates for each grid entry plus dynamic gating.
pub fn fixed_vs_dynamic<T: Scalar>(
    images: &[ImageTensor<T>],
    models: &[CodecModel<T>],
    config: &AdaptationConfig,
    grid: &[usize],
) -> Result<(Vec<LayerRow>, Vec<RdRecord>)> {
    let mut modes: Vec<(String, GateMode)> = Vec::new();
    if !grid.contains(&0) {
        modes.push((fixed_method(0), GateMode::Fixed(0)));
    }
    modes.extend(grid.iter().map(|&m| (fixed_method(m), GateMode::Fixed(m))));
    modes.push((DYNAMIC_METHOD.to_string(), GateMode::Dynamic));
    let records = evaluate(images, models, config, &modes)?;
    let rows = layer_table(&records, grid)?;
    Ok((rows, records))
}

pub fn layer_table(records: &[RdRecord], grid: &[usize]) -> Result<Vec<LayerRow>> {
    let curves = curves_from_records(records)?;
    let anchor = curve(&curves, &fixed_method(0))?;
    let mut names: Vec<String> = grid.iter().map(|&m| fixed_method(m)).collect();
    names.push(DYNAMIC_METHOD.to_string());
    names
        .into_iter()
        .map(|m| {
            Ok(LayerRow {
                bd_rate: bd_rate(curve(&curves, &m)?, anchor)?,
                method: m,
            })
        })
        .collect()
}
