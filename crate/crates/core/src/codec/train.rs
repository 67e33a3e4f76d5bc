//! Rate–distortion training of the base codec on random crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clamped_mse, quantize_latent_value, CodecConfig, CodecModel, DISTORTION_SCALE};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub codec: CodecConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            steps: 2000,
            batch: 4,
            crop: 32,
            lr: 2e-3,
            seed: 0,
            codec: CodecConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One image's contribution to the training loss and gradient.
struct Sample<T> {
    loss: f64,
    bpp: f64,
    mse: f64,
    grad: Vec<T>,
}

fn sample_grad<T: Scalar>(model: &CodecModel<T>, image: &ImageTensor<T>, lambda: f64) -> Result<Sample<T>> {
    let pixels = (image.height() * image.width()) as f64;
    let analysis = model.analysis_forward(image)?;
    let y = &analysis.latent;
    let yhat = Tensor::from_vec(
        y.channels,
        y.height,
        y.width,
        y.data.iter().map(|&v| T::lit(quantize_latent_value(v) as f64)).collect(),
    );
    let rate = model.prior.rate_with_grad(&yhat.data, yhat.plane(), true);
    let synth = model.synthesis_forward(&yhat, &[], |_, _| T::one())?;
    let (mse, d_out) = clamped_mse(&synth.output, &image.pixels);
    let dscale = T::lit(lambda * DISTORTION_SCALE);
    let d_out = d_out.map(|v| v * dscale);
    let back = model.synthesis_backward(&synth, &[], &d_out, true, true);
    let inv_p = T::lit(1.0 / pixels);
    let mut d_y = back.d_latent.expect("latent grad");
    // straight-through: gradient at ŷ passes to y unchanged
    for (g, &r) in d_y.data.iter_mut().zip(&rate.d_symbols) {
        *g += r * inv_p;
    }
    let analysis_grads = model.analysis_backward(&analysis, &d_y);

    let mut grad = Vec::with_capacity(model.flat_params().len());
    for (w, b) in &analysis_grads {
        grad.extend_from_slice(w);
        grad.extend_from_slice(b);
    }
    for (w, b) in back.d_base.as_ref().expect("base grads") {
        grad.extend_from_slice(w);
        grad.extend_from_slice(b);
    }
    grad.extend(rate.d_loc.iter().map(|&v| v * inv_p));
    grad.extend(rate.d_log_scale.iter().map(|&v| v * inv_p));

    let bpp = rate.bits.as_f64() / pixels;
    let mse = mse.as_f64();
    Ok(Sample {
        loss: bpp + lambda * DISTORTION_SCALE * mse,
        bpp,
        mse,
        grad,
    })
}

/// Hard-quantized RD loss `bpp + λ·255²·MSE` of one padded image.
pub fn rd_loss<T: Scalar>(model: &CodecModel<T>, image: &ImageTensor<T>, lambda: f64) -> Result<f64> {
    let y = model.analyze(image)?.quantized();
    let bits = model.latent_rate(&y)?;
    let x = model.synthesize(&y, None, None)?;
    let (mse, _) = clamped_mse(&x.pixels, &image.pixels);
    Ok(bits / (image.height() * image.width()) as f64 + lambda * DISTORTION_SCALE * mse.as_f64())
}

/// Trains a fresh codec for `config.steps` Adam steps on random crops; the
/// learning rate drops tenfold for the last fifth of the steps.
pub fn train_base<T: Scalar>(dataset: &[ImageTensor<T>], config: &TrainConfig) -> Result<(CodecModel<T>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
        return Err(Error::Contract(format!("lambda must be >= 0, got {}", config.lambda)));
    }
    let s = config.codec.downsampling;
    if config.crop == 0 || config.crop % s != 0 {
        return Err(Error::Contract(format!("crop {} must be a multiple of {s}", config.crop)));
    }
    if let Some(small) = dataset.iter().find(|im| im.height() < config.crop || im.width() < config.crop) {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than crop {}",
            small.height(),
            small.width(),
            config.crop
        )));
    }
    let mut model = CodecModel::<T>::new(config.codec, config.seed)?;
    model.lambda = config.lambda;
    let mut params = model.flat_params();
    let mut opt = Adam::new(config.lr, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let mut report = TrainReport::default();
    let batch = config.batch.max(1);
    let inv_b = T::lit(1.0 / batch as f64);

    for step in 0..config.steps {
        let mut grad = vec![T::zero(); params.len()];
        let (mut loss, mut bpp, mut mse) = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            let im = &dataset[rng.random_range(0..dataset.len())];
            let top = rng.random_range(0..=im.height() - config.crop);
            let left = rng.random_range(0..=im.width() - config.crop);
            let crop = im.window(top, left, config.crop);
            let sample = sample_grad(&model, &crop, config.lambda)?;
            for (g, v) in grad.iter_mut().zip(&sample.grad) {
                *g += *v * inv_b;
            }
            loss += sample.loss / batch as f64;
            bpp += sample.bpp / batch as f64;
            mse += sample.mse / batch as f64;
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                loss,
                rate_bpp: bpp,
                mse,
            });
        }
        report.losses.push(loss);
        if step == config.steps * 4 / 5 {
            opt.lr = T::lit(config.lr * 0.1);
        }
        opt.step(&mut params, &grad);
        model.set_flat_params(&params);
    }
    report.initial_loss = report.losses.first().copied().unwrap_or(f64::NAN);
    let tail = report.losses.len().min(20).max(1);
    report.final_loss = report.losses.iter().rev().take(tail).sum::<f64>() / tail as f64;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(seed: usize) -> ImageTensor<f32> {
        let (h, w) = (32, 32);
        let mut data = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = (((x + seed * 3) / 4 + y / 8 + c) % 3) as f32 / 2.0;
                    data[(c * h + y) * w + x] = v;
                }
            }
        }
        ImageTensor::new(Tensor::from_vec(3, h, w, data)).unwrap()
    }

    fn small_config(lambda: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            lambda,
            steps,
            batch: 1,
            crop: 16,
            lr: 3e-3,
            seed: 11,
            codec: CodecConfig::default(),
        }
    }

    #[test]
    fn training_reduces_loss_and_is_seeded() {
        let data: Vec<_> = (0..3).map(stripes).collect();
        let cfg = small_config(0.01, 60);
        let (m, report) = train_base(&data, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        let before = CodecModel::<f32>::new(cfg.codec, cfg.seed).unwrap();
        let held = stripes(7);
        assert!(rd_loss(&m, &held, 0.01).unwrap() < rd_loss(&before, &held, 0.01).unwrap());
        let (m2, _) = train_base(&data, &cfg).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn pure_rate_objective_collapses_latents() {
        let data: Vec<_> = (0..2).map(stripes).collect();
        let (m, _) = train_base(&data, &small_config(0.0, 60)).unwrap();
        let y = m.analyze(&stripes(0)).unwrap().quantized();
        let bpp = m.latent_rate(&y).unwrap() / (32.0 * 32.0);
        let init = CodecModel::<f32>::new(CodecConfig::default(), 11).unwrap();
        let y0 = init.analyze(&stripes(0)).unwrap().quantized();
        assert!(bpp < init.latent_rate(&y0).unwrap() / (32.0 * 32.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(train_base::<f32>(&[], &small_config(0.01, 1)).is_err());
        assert!(train_base(&[stripes(0)], &small_config(-1.0, 1)).is_err());
        let cfg = TrainConfig {
            crop: 12,
            ..small_config(0.01, 1)
        };
        assert!(train_base(&[stripes(0)], &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            lr: 1e30,
            ..small_config(1e30, 5)
        };
        match train_base(&[stripes(0)], &cfg) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r)),
        }
    }
}
