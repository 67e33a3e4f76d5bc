//! Seeded procedural image sets.
//!
//! `natural_like` stands in for downscaled photographs (smooth shading,
//! occluding shaded objects with soft rims, oriented texture, sensor noise). `pixel_art` and
//! `vector_art` are the out-of-domain sets: blocky limited-palette sprites
//! and flat-colour geometric compositions with hard edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rng_for(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn to_image<T: Scalar>(size: usize, rgb: &[[f64; 3]]) -> ImageTensor<T> {
    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::lit(px[c].clamp(0.0, 1.0));
        }
    }
    ImageTensor {
        pixels: Tensor::from_vec(3, size, size, data),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

pub fn natural_like<T: Scalar>(index: usize, size: usize, seed: u64) -> ImageTensor<T> {
    let mut rng = rng_for(seed, index, 0x6e61);
    let s = size as f64;
    let sky = random_color(&mut rng);
    let ground = random_color(&mut rng);
    let horizon = rng.random_range(0.3..0.7);
    let tilt = rng.random_range(-0.3..0.3);
    // Occluding "dead leaves": shaded discs with a camera-soft rim.
    struct Leaf {
        center: [f64; 2],
        radius: f64,
        color: [f64; 3],
        shade: [f64; 2],
    }
    let leaves: Vec<Leaf> = (0..rng.random_range(6..24))
        .map(|_| Leaf {
            center: [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)],
            // small leaves are more frequent than large ones
            radius: 0.03 / (1.0 - rng.random_range(0.0..0.88f64)),
            color: random_color(&mut rng),
            shade: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
        })
        .collect();
    let softness = rng.random_range(0.2..1.0) / s;
    let freq = rng.random_range(3.0..10.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let texture_amp = rng.random_range(0.02..0.08);
    let noise = rng.random_range(0.005..0.02);
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let edge = v - horizon - tilt * (u - 0.5);
            let mix = 1.0 / (1.0 + (-edge * 30.0).exp());
            let shade = 0.85 + 0.15 * (1.0 - v);
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = shade * (sky[k] * (1.0 - mix) + ground[k] * mix);
            }
            for leaf in &leaves {
                let (du, dv) = (u - leaf.center[0], v - leaf.center[1]);
                let dist = (du * du + dv * dv).sqrt() - leaf.radius;
                let w = 1.0 / (1.0 + (dist / softness).exp());
                let lit = 1.0 + leaf.shade[0] * du + leaf.shade[1] * dv;
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - w) + leaf.color[k] * lit * w;
                }
            }
            let t = (freq * (u * angle.cos() + v * angle.sin()) * std::f64::consts::TAU).sin() * texture_amp * mix;
            for ck in c.iter_mut() {
                *ck += t + rng.random_range(-noise..noise);
            }
            px.push(c);
        }
    }
    to_image(size, &px)
}

pub fn pixel_art<T: Scalar>(index: usize, size: usize, seed: u64) -> ImageTensor<T> {
    let mut rng = rng_for(seed, index, 0x7078);
    let cell = (size / 8).max(1);
    let cells = size.div_ceil(cell);
    let palette: Vec<[f64; 3]> = (0..rng.random_range(3..6))
        .map(|_| {
            let mut c = random_color(&mut rng);
            // saturate towards the nearest corner of the RGB cube
            for v in c.iter_mut() {
                *v = if *v > 0.5 { 0.6 + 0.4 * *v } else { 0.4 * *v };
            }
            c
        })
        .collect();
    let outline = [0.05, 0.05, 0.08];
    let background = palette[0];
    // A horizontally mirrored sprite over a tiled background.
    let half = cells.div_ceil(2);
    let mut grid = vec![usize::MAX; cells * cells];
    let margin = cells / 8;
    for cy in margin..cells - margin {
        for cx in margin..half {
            if rng.random_bool(0.55) {
                let p = rng.random_range(1..palette.len());
                grid[cy * cells + cx] = p;
                grid[cy * cells + (cells - 1 - cx)] = p;
            }
        }
    }
    let filled = |cx: isize, cy: isize| {
        cx >= 0 && cy >= 0 && (cx as usize) < cells && (cy as usize) < cells && grid[cy as usize * cells + cx as usize] != usize::MAX
    };
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = ((x / cell) as isize, (y / cell) as isize);
            let c = if filled(cx, cy) {
                palette[grid[cy as usize * cells + cx as usize]]
            } else if filled(cx - 1, cy) || filled(cx + 1, cy) || filled(cx, cy - 1) || filled(cx, cy + 1) {
                outline
            } else if (cx + cy) % 2 == 0 {
                background
            } else {
                [background[0] * 0.9, background[1] * 0.9, background[2] * 0.9]
            };
            px.push(c);
        }
    }
    to_image(size, &px)
}

pub fn vector_art<T: Scalar>(index: usize, size: usize, seed: u64) -> ImageTensor<T> {
    let mut rng = rng_for(seed, index, 0x7665);
    let s = size as f64;
    let mut px = vec![random_color(&mut rng); size * size];
    for _ in 0..rng.random_range(3..7) {
        let color = random_color(&mut rng);
        let cx = rng.random_range(0.1..0.9) * s;
        let cy = rng.random_range(0.1..0.9) * s;
        let r = rng.random_range(0.08..0.35) * s;
        let kind = rng.random_range(0..3);
        let tri: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s)));
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match kind {
                    0 => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
                    1 => (fx - cx).abs() <= r && (fy - cy).abs() <= r * 0.6,
                    _ => {
                        let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (fx - bx) * (ay - by) - (ax - bx) * (fy - by);
                        let d = [sign(tri[0], tri[1]), sign(tri[1], tri[2]), sign(tri[2], tri[0])];
                        !(d.iter().any(|&v| v < 0.0) && d.iter().any(|&v| v > 0.0))
                    }
                };
                if inside {
                    px[y * size + x] = color;
                }
            }
        }
    }
    to_image(size, &px)
}

/// `n` images from one generator.
pub fn generate<T: Scalar>(
    generator: fn(usize, usize, u64) -> ImageTensor<T>,
    n: usize,
    size: usize,
    seed: u64,
) -> Vec<ImageTensor<T>> {
    (0..n).map(|i| generator(i, size, seed)).collect()
}

/// Half pixel art, half vector art.
pub fn out_of_domain<T: Scalar>(n: usize, size: usize, seed: u64) -> Vec<ImageTensor<T>> {
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                pixel_art(i / 2, size, seed)
            } else {
                vector_art(i / 2, size, seed)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_valid() {
        for g in [natural_like::<f32>, pixel_art::<f32>, vector_art::<f32>] {
            let a = g(3, 32, 7);
            assert_eq!((a.height(), a.width()), (32, 32));
            assert_eq!(a, g(3, 32, 7));
            assert_ne!(a, g(4, 32, 7));
            assert!(a.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(ImageTensor::new(a.pixels.clone()).is_ok());
        }
    }

    #[test]
    fn pixel_art_uses_few_colors() {
        let im = pixel_art::<f64>(0, 64, 1);
        let mut colors: Vec<[u8; 3]> = im.to_rgb8().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        colors.sort();
        colors.dedup();
        assert!(colors.len() <= 8, "{} colors", colors.len());
    }
}
