//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All transforms, priors and optimizers are generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Checkpoints record which one was used.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Precision tag written into checkpoints and bank files.
    const TAG: &'static str;
    /// Serialized width in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Converts an `f64` literal; panics only for values no float can hold.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:literal) => {
        impl Scalar for $t {
            const TAG: &'static str = $tag;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");

/// `exp` built only from IEEE-754 basic operations, so results are identical
/// on every platform. Used wherever a value feeds an entropy-coder table.
pub fn portable_exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        return 0.0;
    }
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let k = (x * std::f64::consts::LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // |r| <= 0.35; degree-13 Taylor polynomial is exact to well below 1 ulp
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..=13 {
        term = term * r / i as f64;
        sum += term;
    }
    scale_pow2(sum, k as i32)
}

fn scale_pow2(mut v: f64, mut k: i32) -> f64 {
    // Split large shifts so the intermediate power of two stays normal.
    while k > 1000 {
        v *= f64::from_bits(((1023 + 1000) as u64) << 52);
        k -= 1000;
    }
    while k < -1000 {
        v *= f64::from_bits(((1023 - 1000) as u64) << 52);
        k += 1000;
    }
    v * f64::from_bits(((1023 + k) as u64) << 52)
}

/// Logistic CDF `0.5 + 0.5·tanh(z/2)` evaluated with [`portable_exp`].
pub fn portable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + portable_exp(-z))
    } else {
        let e = portable_exp(z);
        e / (1.0 + e)
    }
}
