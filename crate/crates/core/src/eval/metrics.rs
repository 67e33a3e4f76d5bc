//! Distortion metrics and the Bjøntegaard delta rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB on the 8-bit views, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar, U: Scalar>(x: &ImageTensor<T>, y: &ImageTensor<U>) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::Shape(format!(
            "psnr of {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let (a, b) = (x.to_rgb8(), y.to_rgb8());
    let sse: u64 = a
        .iter()
        .zip(&b)
        .map(|(&p, &q)| {
            let d = p as i64 - q as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse as f64 / a.len() as f64;
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

pub fn bpp(bits: f64, height: usize, width: usize) -> f64 {
    bits / (height * width) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub method: String,
    /// Sorted by strictly increasing bpp.
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(method: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        let method = method.into();
        if points.len() < 2 {
            return Err(Error::Contract(format!("curve '{method}' needs at least 2 points")));
        }
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr_db.is_finite())) {
            return Err(Error::Contract(format!("curve '{method}' has a non-positive rate or non-finite PSNR")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::Contract(format!("curve '{method}' has repeated rates")));
        }
        Ok(Self { method, points })
    }

    fn psnr_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr_db), hi.max(p.psnr_db)))
    }
}

/// Least-squares polynomial of `log(bpp)` in `psnr − center`, lowest degree first.
fn fit_log_rate(curve: &RDCurve, center: f64) -> Vec<f64> {
    let n = curve.points.len();
    let degree = 3.min(n - 1);
    let a = DMatrix::from_fn(n, degree + 1, |i, j| (curve.points[i].psnr_db - center).powi(j as i32));
    let b = DVector::from_iterator(n, curve.points.iter().map(|p| p.bpp.ln()));
    let coef = a.svd(true, true).solve(&b, 1e-12).expect("svd with both factors");
    coef.iter().copied().collect()
}

fn integrate(coef: &[f64], lo: f64, hi: f64) -> f64 {
    let anti = |t: f64| {
        coef.iter()
            .enumerate()
            .map(|(j, c)| c * t.powi(j as i32 + 1) / (j as f64 + 1.0))
            .sum::<f64>()
    };
    anti(hi) - anti(lo)
}

/// Average rate difference of `test` against `anchor` at equal PSNR, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(test: &RDCurve, anchor: &RDCurve) -> Result<f64> {
    let (tl, th) = test.psnr_range();
    let (al, ah) = anchor.psnr_range();
    let lo = tl.max(al);
    let hi = th.min(ah);
    if !(hi > lo) {
        return Err(Error::NoOverlap(format!(
            "'{}' spans [{tl:.3}, {th:.3}] dB, '{}' spans [{al:.3}, {ah:.3}] dB",
            test.method, anchor.method
        )));
    }
    let center = 0.5 * (lo + hi);
    let ct = fit_log_rate(test, center);
    let ca = fit_log_rate(anchor, center);
    let (l, h) = (lo - center, hi - center);
    let avg = (integrate(&ct, l, h) - integrate(&ca, l, h)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}
