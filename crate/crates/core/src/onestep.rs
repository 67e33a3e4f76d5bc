//! Iteration-free adaptation from a bank of per-cluster updates.
//!
//! A corpus is embedded with the spatial mean of the base encoder's latent,
//! clustered with k-means, and one low-rank update of the penultimate
//! synthesis layer is fitted per cluster. Encoding then costs one analysis
//! pass and a nearest-centre lookup; no gradient steps are taken.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{make_low_rank, AdapterKind, LayerUpdate};
use crate::bitstream::{pack, CompressedBlob, PackRequest};
use crate::codec::{clamped_mse, CodecModel, LatentCode, ADAPTABLE_LAYERS, DISTORTION_SCALE};
use crate::delta_prior::{noisy_delta_rate, quantize_delta, DeltaPriorConfig, QuantizedDelta};
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::gate::GateVector;
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::wire::{put_string, Reader};

/// Spatially averaged base latent, one value per channel.
pub const EMBEDDER_ID: &str = "latent-mean-v1";
/// Penultimate synthesis layer (0-based).
pub const ONESTEP_LAYER: usize = ADAPTABLE_LAYERS - 2;

const BANK_MAGIC: &[u8; 4] = b"DLCB";
const BANK_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneStepConfig {
    pub n_clusters: usize,
    pub fit_steps: usize,
    pub rank: usize,
    pub lr: f64,
    /// Defaults to the model's λ.
    pub lambda: Option<f64>,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub prior: DeltaPriorConfig,
}

impl Default for OneStepConfig {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            fit_steps: 200,
            rank: 2,
            lr: 5e-3,
            lambda: None,
            kmeans_iters: 50,
            seed: 0,
            prior: DeltaPriorConfig::default(),
        }
    }
}

/// Embeds an image of any size.
pub fn embed<T: Scalar>(image: &ImageTensor<T>, model: &CodecModel<T>) -> Result<Vec<f64>> {
    let y = model.analyze(&image.pad_to_multiple(model.downsampling()))?;
    Ok(latent_embedding(&y))
}

fn latent_embedding<T: Scalar>(y: &LatentCode<T>) -> Vec<f64> {
    let plane = y.values.plane();
    (0..y.values.channels)
        .map(|c| y.values.data[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64)
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centre; ties go to the lowest index.
pub fn nearest(centers: &[Vec<f64>], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, point);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// D²-weighted draw of a new centre (k-means++).
fn plusplus_draw(points: &[Vec<f64>], centers: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Option<usize> {
    let weights: Vec<f64> = points
        .iter()
        .map(|p| centers.iter().map(|c| dist2(c, p)).fold(f64::INFINITY, f64::min))
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && target < w {
            return Some(i);
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Empty clusters re-seeded along the way.
    pub restarts: usize,
}

/// Lloyd's algorithm with k-means++ seeding. An empty cluster is re-seeded
/// by a fresh k-means++ draw against the remaining centres.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::Contract(format!("k-means with k={k} on {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6d);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let i = plusplus_draw(points, &centers, &mut rng)
            .ok_or_else(|| Error::Contract(format!("fewer than {k} distinct embeddings")))?;
        centers.push(points[i].clone());
    }
    let mut assignments = vec![0; points.len()];
    let mut restarts = 0;
    for _ in 0..iters.max(1) {
        let next: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        for (p, &a) in points.iter().zip(&next) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                let others: Vec<Vec<f64>> = (0..k).filter(|&o| o != c).map(|o| centers[o].clone()).collect();
                let i = plusplus_draw(points, &others, &mut rng)
                    .ok_or_else(|| Error::Contract(format!("fewer than {k} distinct embeddings")))?;
                centers[c] = points[i].clone();
                restarts += 1;
                reseeded = true;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let converged = !reseeded && next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }
    assignments = points.iter().map(|p| nearest(&centers, p)).collect();
    // Final safety net: no cluster may end empty.
    for c in 0..k {
        if !assignments.contains(&c) {
            let i = (0..points.len())
                .filter(|&i| assignments.iter().filter(|&&a| a == assignments[i]).count() > 1)
                .max_by(|&a, &b| dist2(&points[a], &centers[assignments[a]]).total_cmp(&dist2(&points[b], &centers[assignments[b]])))
                .ok_or_else(|| Error::Contract("cannot fill empty cluster".into()))?;
            centers[c] = points[i].clone();
            assignments[i] = c;
            restarts += 1;
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        restarts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBank {
    pub embedder: String,
    pub codec_fingerprint: u64,
    pub layer_index: usize,
    pub rank: usize,
    pub prior: DeltaPriorConfig,
    pub centers: Vec<Vec<f64>>,
    pub deltas: Vec<QuantizedDelta>,
}

impl ClusterBank {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }

    pub fn nearest(&self, embedding: &[f64]) -> usize {
        nearest(&self.centers, embedding)
    }

    /// ```text
    /// "DLCB" | version u8 | embedder string | codec fingerprint u64
    /// | n u16 | d u16 | layer u8 | rank u8 | w f64 | μ f64 | s f64 | max_index u16
    /// | centres n×d f64 | per cluster: count u32, indices i16
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.push(BANK_VERSION);
        put_string(&mut out, &self.embedder);
        out.extend_from_slice(&self.codec_fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u16).to_le_bytes());
        out.push(self.layer_index as u8);
        out.push(self.rank as u8);
        for v in [self.prior.w, self.prior.mu, self.prior.s] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.prior.max_index as u16).to_le_bytes());
        for c in &self.centers {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for d in &self.deltas {
            out.extend_from_slice(&(d.len() as u32).to_le_bytes());
            for &i in &d.indices {
                out.extend_from_slice(&(i as i16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != BANK_MAGIC {
            return Err(Error::Format("not a cluster bank (bad magic)".into()));
        }
        let version = r.u8("version")?;
        if version != BANK_VERSION {
            return Err(Error::Incompatible(format!("bank version {version}, expected {BANK_VERSION}")));
        }
        let embedder = r.string("embedder")?;
        let codec_fingerprint = r.u64("codec fingerprint")?;
        let n = r.u16("cluster count")? as usize;
        let d = r.u16("dimension")? as usize;
        let layer_index = r.u8("layer")? as usize;
        let rank = r.u8("rank")? as usize;
        let prior = DeltaPriorConfig {
            w: r.f64("prior w")?,
            mu: r.f64("prior mu")?,
            s: r.f64("prior s")?,
            max_index: r.u16("prior max index")? as i32,
        };
        prior.validate()?;
        let mut centers = Vec::with_capacity(n);
        for _ in 0..n {
            centers.push((0..d).map(|_| r.f64("centre")).collect::<Result<Vec<_>>>()?);
        }
        let mut deltas = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32("delta length")? as usize;
            let mut indices = Vec::with_capacity(len);
            for _ in 0..len {
                let i = i16::from_le_bytes(r.take(2, "delta index")?.try_into().expect("2 bytes")) as i32;
                if i.abs() > prior.max_index {
                    return Err(r.corrupt(format!("delta index {i} outside the prior range")));
                }
                indices.push(i);
            }
            deltas.push(QuantizedDelta { indices, config: prior });
        }
        r.finish("cluster bank")?;
        Ok(Self {
            embedder,
            codec_fingerprint,
            layer_index,
            rank,
            prior,
            centers,
            deltas,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn check<T: Scalar>(&self, model: &CodecModel<T>) -> Result<()> {
        if self.embedder != EMBEDDER_ID || self.dim() != model.config.latent_channels {
            return Err(Error::Incompatible(format!(
                "bank embedder '{}' (d={}) does not match this codec",
                self.embedder,
                self.dim()
            )));
        }
        if self.codec_fingerprint != model.fingerprint() {
            return Err(Error::Incompatible("bank was built for a different base codec".into()));
        }
        if self.layer_index >= ADAPTABLE_LAYERS || self.len() > 256 {
            return Err(Error::Format("bank layer or cluster count out of range".into()));
        }
        Ok(())
    }
}

/// Fits one update on `layer` shared by all `images` (one image per step,
/// cycling) and returns it quantized.
fn fit_cluster_delta<T: Scalar>(
    images: &[(&ImageTensor<T>, crate::tensor::Tensor<T>)],
    model: &CodecModel<T>,
    config: &OneStepConfig,
    lambda: f64,
    seed: u64,
) -> Result<QuantizedDelta> {
    let layer = ONESTEP_LAYER;
    let mut update: LayerUpdate<T> = make_low_rank(model.layer_shape(layer), config.rank, layer, seed)?;
    let mut opt = Adam::new(config.lr, update.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0153);
    let dscale = T::lit(lambda * DISTORTION_SCALE);
    for step in 0..config.fit_steps {
        let (image, yhat) = &images[step % images.len()];
        let inv_p = T::lit(1.0 / (image.height() * image.width()) as f64);
        let q = update.with_params(quantize_delta(&update.params, &config.prior).dequantize());
        let mut refs: Vec<Option<&LayerUpdate<T>>> = vec![None; ADAPTABLE_LAYERS];
        refs[layer] = Some(&q);
        let state = model.synthesis_forward(yhat, &refs, |_, _| T::one())?;
        let (mse, d_out) = clamped_mse(&state.output, &image.pixels);
        if !mse.is_finite() {
            return Err(Error::Numerical {
                step,
                detail: "cluster fit distortion".into(),
            });
        }
        let back = model.synthesis_backward(&state, &refs, &d_out.map(|v| v * dscale), false, false);
        let (_, rate_grad) = noisy_delta_rate(&update.params, &config.prior, &mut rng);
        let grad: Vec<T> = back.d_updates[layer]
            .iter()
            .zip(&rate_grad)
            .map(|(&d, &r)| d + r * inv_p)
            .collect();
        opt.step(&mut update.params, &grad);
    }
    Ok(quantize_delta(&update.params, &config.prior))
}

/// Clusters `corpus` and fits one update per cluster.
pub fn build_bank<T: Scalar>(corpus: &[ImageTensor<T>], model: &CodecModel<T>, config: &OneStepConfig) -> Result<ClusterBank> {
    config.prior.validate()?;
    if config.n_clusters == 0 || config.n_clusters > 256 {
        return Err(Error::Contract(format!("n_clusters must be in 1..=256, got {}", config.n_clusters)));
    }
    if corpus.len() < config.n_clusters {
        return Err(Error::Contract(format!(
            "corpus of {} images is smaller than {} clusters",
            corpus.len(),
            config.n_clusters
        )));
    }
    let lambda = config.lambda.unwrap_or(model.lambda);
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Contract(format!("lambda must be > 0, got {lambda}")));
    }
    let padded: Vec<ImageTensor<T>> = corpus.iter().map(|x| x.pad_to_multiple(model.downsampling())).collect();
    let mut latents = Vec::with_capacity(corpus.len());
    let mut embeddings = Vec::with_capacity(corpus.len());
    for x in &padded {
        let y = model.analyze(x)?;
        embeddings.push(latent_embedding(&y));
        latents.push(y.quantized().quantized_tensor()?);
    }
    let km = kmeans(&embeddings, config.n_clusters, config.kmeans_iters, config.seed)?;
    let mut deltas = Vec::with_capacity(config.n_clusters);
    for c in 0..config.n_clusters {
        let members: Vec<(&ImageTensor<T>, crate::tensor::Tensor<T>)> = km
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| (&padded[i], latents[i].clone()))
            .collect();
        let seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (c as u64 + 1);
        deltas.push(fit_cluster_delta(&members, model, config, lambda, seed)?);
    }
    Ok(ClusterBank {
        embedder: EMBEDDER_ID.to_string(),
        codec_fingerprint: model.fingerprint(),
        layer_index: ONESTEP_LAYER,
        rank: config.rank,
        prior: config.prior,
        centers: km.centers,
        deltas,
    })
}

#[derive(Clone, Debug)]
pub struct OneStepOutput<T> {
    pub blob: CompressedBlob,
    pub cluster: usize,
    /// Server-side reconstruction at the original size.
    pub reconstruction: ImageTensor<T>,
    pub psnr: f64,
    pub bpp: f64,
}

/// One analysis pass, nearest-centre lookup, pack. No gradient steps.
pub fn onestep_encode<T: Scalar>(image: &ImageTensor<T>, model: &CodecModel<T>, bank: &ClusterBank) -> Result<OneStepOutput<T>> {
    bank.check(model)?;
    let padded = image.pad_to_multiple(model.downsampling());
    let y = model.analyze(&padded)?;
    let cluster = bank.nearest(&latent_embedding(&y));
    let latent = y.quantized();
    let mut deltas = vec![None; ADAPTABLE_LAYERS];
    deltas[bank.layer_index] = Some(bank.deltas[cluster].clone());
    let gates = GateVector::from_bits((0..ADAPTABLE_LAYERS).map(|k| k == bank.layer_index).collect());
    let blob = pack(
        model,
        &PackRequest {
            latent: &latent,
            deltas: &deltas,
            gates: &gates,
            variant: AdapterKind::LowRank,
            rank: bank.rank,
            prior: bank.prior,
            height: image.height(),
            width: image.width(),
            cluster: Some(cluster as u8),
        },
    )?;
    let updates = crate::bitstream::updates_from_quantized(model, AdapterKind::LowRank, bank.rank, &deltas)?;
    let reconstruction = model
        .synthesize(&latent, Some(&updates), Some(&gates))?
        .crop(image.height(), image.width())?;
    let psnr = psnr(image, &reconstruction)?;
    let bpp = blob.bpp();
    Ok(OneStepOutput {
        blob,
        cluster,
        reconstruction,
        psnr,
        bpp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::unpack;
    use crate::codec::{analysis_pass_count, backward_pass_count, CodecConfig};
    use crate::eval::datasets::{pixel_art, vector_art};

    fn model() -> CodecModel<f32> {
        let mut m = CodecModel::new(CodecConfig::default(), 8).unwrap();
        m.lambda = 0.01;
        m
    }

    fn corpus(n: usize) -> Vec<ImageTensor<f32>> {
        (0..n)
            .map(|i| if i % 2 == 0 { pixel_art(i, 16, 3) } else { vector_art(i, 16, 3) })
            .collect()
    }

    fn small() -> OneStepConfig {
        OneStepConfig {
            n_clusters: 3,
            fit_steps: 6,
            ..OneStepConfig::default()
        }
    }

    #[test]
    fn nearest_ties_go_to_lowest_index() {
        let centers = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 5.0]];
        assert_eq!(nearest(&centers, &[0.0, 0.0]), 0);
        assert_eq!(nearest(&centers, &[-0.9, 0.0]), 1);
    }

    #[test]
    fn kmeans_fills_every_cluster() {
        let mut pts: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 4) as f64 * 10.0, (i / 4) as f64 * 0.01]).collect();
        pts.push(vec![100.0, 100.0]);
        let km = kmeans(&pts, 5, 30, 1).unwrap();
        for c in 0..5 {
            assert!(km.assignments.contains(&c));
        }
        assert_eq!(km, kmeans(&pts, 5, 30, 1).unwrap());
        assert!(kmeans(&pts[..2], 3, 5, 0).is_err());
        assert!(kmeans(&vec![vec![1.0]; 4], 2, 5, 0).is_err());
    }

    #[test]
    fn bank_is_seeded_and_serializes() {
        let m = model();
        let c = corpus(6);
        let bank = build_bank(&c, &m, &small()).unwrap();
        assert_eq!(bank.len(), 3);
        assert!(bank.deltas.iter().all(|d| d.len() == 64));
        let again = build_bank(&c, &m, &small()).unwrap();
        assert_eq!(again.to_bytes(), bank.to_bytes());
        let back = ClusterBank::from_bytes(&bank.to_bytes()).unwrap();
        assert_eq!(back, bank);
        let x = pixel_art::<f32>(9, 16, 4);
        let e = embed(&x, &m).unwrap();
        assert_eq!(back.nearest(&e), bank.nearest(&e));
        assert!(ClusterBank::from_bytes(&bank.to_bytes()[..40]).is_err());
    }

    #[test]
    fn single_cluster_bank_has_one_global_delta() {
        let m = model();
        let cfg = OneStepConfig {
            n_clusters: 1,
            ..small()
        };
        let bank = build_bank(&corpus(3), &m, &cfg).unwrap();
        assert_eq!(bank.len(), 1);
        let out = onestep_encode(&vector_art(5, 16, 1), &m, &bank).unwrap();
        assert_eq!(out.cluster, 0);
    }

    #[test]
    fn encode_selects_source_cluster_without_gradients() {
        let m = model();
        let c = corpus(4);
        let cfg = OneStepConfig {
            n_clusters: 4,
            ..small()
        };
        let bank = build_bank(&c, &m, &cfg).unwrap();
        for x in &c {
            let e = embed(x, &m).unwrap();
            let target = bank.centers.iter().position(|ctr| *ctr == e).expect("each image is a centre");
            let (bw, an) = (backward_pass_count(), analysis_pass_count());
            let out = onestep_encode(x, &m, &bank).unwrap();
            assert_eq!(backward_pass_count(), bw);
            assert_eq!(analysis_pass_count(), an + 1);
            assert_eq!(out.cluster, target);
            assert_eq!(out.blob.header.cluster, Some(target as u8));
            assert_eq!(unpack(&out.blob, &m).unwrap(), out.reconstruction);
        }
    }

    #[test]
    fn payload_overhead_is_content_independent() {
        let m = model();
        let bank = build_bank(&corpus(6), &m, &small()).unwrap();
        let plain = |x: &ImageTensor<f32>| {
            let y = m.analyze(x).unwrap().quantized();
            pack(
                &m,
                &PackRequest {
                    latent: &y,
                    deltas: &[None, None, None, None],
                    gates: &GateVector::all(4, false),
                    variant: AdapterKind::LowRank,
                    rank: 2,
                    prior: bank.prior,
                    height: 16,
                    width: 16,
                    cluster: None,
                },
            )
            .unwrap()
        };
        for x in [pixel_art::<f32>(20, 16, 9), vector_art::<f32>(21, 16, 9)] {
            let out = onestep_encode(&x, &m, &bank).unwrap();
            let base = plain(&x);
            assert_eq!(out.blob.content_stream, base.content_stream);
            let overhead = out.blob.total_bytes() - base.total_bytes();
            // cluster id + one layer record + the cluster's model stream
            assert_eq!(overhead, 1 + 7 + out.blob.model_stream.len());
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let m = model();
        let bank = build_bank(&corpus(3), &m, &OneStepConfig { n_clusters: 2, ..small() }).unwrap();
        let other = CodecModel::<f32>::new(CodecConfig::default(), 99).unwrap();
        assert!(matches!(onestep_encode(&pixel_art(0, 16, 0), &other, &bank), Err(Error::Incompatible(_))));
    }
}
