//! Channel-major feature maps and the handful of layer primitives the codec
//! needs, each with a hand-written backward pass.
//!
//! Every kernel accumulates in a fixed order using only `+` and `*`, so a
//! given input produces bit-identical output on any IEEE-754 platform.

use crate::scalar::Scalar;

/// A `channels × height × width` feature map stored row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.data, &other.data)
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `out (m×n) += a (m×k) · b (k×n)`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out (m×n) += aᵀ · b` with `a` stored as `k×m`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(&mut out[i * n..(i + 1) * n], a[p * m + i], brow);
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `out (m×n) += a (m×k) · bᵀ` with `b` stored as `n×k`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, out, m, k, n);
}

/// Geometry of a square-kernel convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Index of the centre tap within a flattened `kernel × kernel` window.
    pub fn center_tap(&self) -> usize {
        (self.kernel / 2) * self.kernel + self.kernel / 2
    }
}

/// Unfolds `x` into a `(c·k·k) × (oh·ow)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &Tensor<T>, geo: ConvGeometry) -> (Vec<T>, usize, usize) {
    let (oh, ow) = geo.out_dims(x.height, x.width);
    let k = geo.kernel;
    let pad = geo.pad() as isize;
    let positions = oh * ow;
    let mut col = vec![T::zero(); x.channels * k * k * positions];
    for c in 0..x.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * geo.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    let src = &x.data[(c * x.height + iy as usize) * x.width..];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < x.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    height: usize,
    width: usize,
    geo: ConvGeometry,
) -> Tensor<T> {
    let (oh, ow) = geo.out_dims(height, width);
    let k = geo.kernel;
    let pad = geo.pad() as isize;
    let positions = oh * ow;
    let mut x = Tensor::zeros(channels, height, width);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * geo.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let base = (c * height + iy as usize) * width;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < width as isize {
                            let v = &mut x.data[base + ix as usize];
                            *v = *v + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Patch matrix kept from a convolution forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub col: Vec<T>,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Convolution with explicit weights `c_out × (c_in·k·k)` and bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    geo: ConvGeometry,
) -> (Tensor<T>, ConvCache<T>) {
    let (col, oh, ow) = im2col(x, geo);
    let inner = x.channels * geo.kernel * geo.kernel;
    assert_eq!(weight.len(), c_out * inner, "conv weight shape");
    let positions = oh * ow;
    let mut out = vec![T::zero(); c_out * positions];
    for (co, &b) in bias.iter().enumerate() {
        out[co * positions..(co + 1) * positions].fill(b);
    }
    gemm_nn(weight, &col, &mut out, c_out, inner, positions);
    (
        Tensor::from_vec(c_out, oh, ow, out),
        ConvCache {
            col,
            in_channels: x.channels,
            in_height: x.height,
            in_width: x.width,
            out_height: oh,
            out_width: ow,
        },
    )
}

/// What a convolution backward pass should produce.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConvGrads {
    pub input: bool,
    pub weight: bool,
    pub center_only: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ConvBackward<T> {
    pub d_input: Option<Tensor<T>>,
    /// Full `c_out × (c_in·k·k)` weight gradient.
    pub d_weight: Option<Vec<T>>,
    /// Centre-tap slice of the weight gradient, `c_out × c_in`.
    pub d_center: Option<Vec<T>>,
    pub d_bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    weight: &[T],
    cache: &ConvCache<T>,
    geo: ConvGeometry,
    want: ConvGrads,
) -> ConvBackward<T> {
    let c_out = dy.channels;
    let positions = cache.out_height * cache.out_width;
    let kk = geo.kernel * geo.kernel;
    let inner = cache.in_channels * kk;
    let d_bias = (0..c_out)
        .map(|co| dy.data[co * positions..(co + 1) * positions].iter().copied().sum())
        .collect();

    let d_input = want.input.then(|| {
        let mut dcol = vec![T::zero(); inner * positions];
        gemm_tn(weight, &dy.data, &mut dcol, inner, c_out, positions);
        col2im(&dcol, cache.in_channels, cache.in_height, cache.in_width, geo)
    });

    let mut d_weight = None;
    let mut d_center = None;
    if want.weight {
        if want.center_only {
            let tap = geo.center_tap();
            let mut center_rows = Vec::with_capacity(cache.in_channels * positions);
            for ci in 0..cache.in_channels {
                let row = ci * kk + tap;
                center_rows.extend_from_slice(&cache.col[row * positions..(row + 1) * positions]);
            }
            let mut g = vec![T::zero(); c_out * cache.in_channels];
            gemm_nt(&dy.data, &center_rows, &mut g, c_out, positions, cache.in_channels);
            d_center = Some(g);
        } else {
            let mut g = vec![T::zero(); c_out * inner];
            gemm_nt(&dy.data, &cache.col, &mut g, c_out, positions, inner);
            d_weight = Some(g);
        }
    }
    ConvBackward {
        d_input,
        d_weight,
        d_center,
        d_bias,
    }
}

/// Leaky ReLU slope for negative inputs.
pub const LEAK: f64 = 0.1;

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let leak = T::lit(LEAK);
    x.map(|v| if v >= T::zero() { v } else { v * leak })
}

/// Backward of [`leaky_relu`] given the pre-activation input.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let leak = T::lit(LEAK);
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * leak })
        .collect();
    Tensor::from_vec(x.channels, x.height, x.width, data)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.channels, x.height, x.width, data)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut out = Tensor::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                let v = &mut out.data[(c * h + y / 2) * w + x / 2];
                *v = *v + dy.at(c, y, x);
            }
        }
    }
    out
}

/// Rearranges `(c·4) × h × w` into `c × 2h × 2w`.
pub fn pixel_shuffle2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.channels % 4, 0, "pixel shuffle needs a multiple of 4 channels");
    let c = x.channels / 4;
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(c, h, w);
    for oc in 0..c {
        for sub in 0..4 {
            let (dy, dx) = (sub / 2, sub % 2);
            for y in 0..x.height {
                for xx in 0..x.width {
                    out.data[(oc * h + 2 * y + dy) * w + 2 * xx + dx] = x.at(oc * 4 + sub, y, xx);
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle2<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut out = Tensor::zeros(dy.channels * 4, h, w);
    for oc in 0..dy.channels {
        for sub in 0..4 {
            let (sy, sx) = (sub / 2, sub % 2);
            for y in 0..h {
                for x in 0..w {
                    out.data[((oc * 4 + sub) * h + y) * w + x] = dy.at(oc, 2 * y + sy, 2 * x + sx);
                }
            }
        }
    }
    out
}
