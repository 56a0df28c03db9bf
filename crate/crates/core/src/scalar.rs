//! Scalar abstraction so every kernel runs in either 32-bit or 64-bit precision.
//!
//! Correctness tests instantiate everything with `f64` (finite-difference
//! headroom); training defaults to `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    /// exp for throughput-critical inner loops: a vectorizable polynomial
    /// for f32 (≈1e-7 relative error), exact libm exp for f64 so every
    /// correctness tolerance is measured against the real thing.
    fn exp_fast(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
}

/// Branch-light f32 exponential: range reduction to e^r·2^n with a degree-5
/// polynomial on r ∈ [−ln2/2, ln2/2]. Pure arithmetic, so results are
/// deterministic and the compiler can vectorize the scan's inner loop.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    // floor(x·log2e + ½) instead of round(): floor lowers to a single SIMD
    // rounding instruction, which keeps this whole function vectorizable.
    let n = (x * LOG2_E + 0.5).floor();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // e^r via Horner; coefficients from the Taylor series.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67
                    + r * (0.041_666_67 + r * (0.008_333_334 + r * 0.001_388_889)))));
    let bits = ((n as i32).wrapping_add(127) as u32).wrapping_shl(23);
    p * f32::from_bits(bits)
}

macro_rules! impl_scalar {
    ($t:ty, $fast:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn exp_fast(self) -> Self {
                $fast(self)
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxs(self, other: Self) -> Self {
                self.max(other)
            }
            fn mins(self, other: Self) -> Self {
                self.min(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}

impl_scalar!(f32, exp_f32);
impl_scalar!(f64, f64::exp);


/// Numerically stable softplus: ln(1 + e^x) without overflow on large x.
#[inline(always)]
pub fn softplus<S: Scalar>(x: S) -> S {
    x.maxs(S::ZERO) + (-x.abs()).exp_fast().ln_1p()
}

/// Logistic sigmoid evaluated without overflow on either tail.
#[inline(always)]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp_fast())
    } else {
        let e = x.exp_fast();
        e / (S::ONE + e)
    }
}
