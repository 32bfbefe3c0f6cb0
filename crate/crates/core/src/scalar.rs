//! Scalar abstraction for the numerical core.
//!
//! Everything from kernel evaluation to the filter objective is written once
//! against [`Real`]. Plain evaluation instantiates it with `f64` (or `f32`),
//! gradients instantiate it with the reverse-mode [`Var`](crate::ad::Var).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Neg, SubAssign};

use num_traits::{Float, NumOps, One, Zero};

/// Real scalar field used throughout the crate.
///
/// Comparisons and branching always go through [`Real::value`], so types that
/// carry derivative information only ever branch on the primal value.
pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + NumOps
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Zero
    + One
    + Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;

    /// Primal value as `f64`.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn square(self) -> Self {
        self * self
    }

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }

    /// `Σ aᵢ bᵢ`. Overridden by tape-based scalars to record a single node.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        let mut acc = Self::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    /// `scale · exp(log_offset − Σ_d e_d (m_d − c_d)²)`, the unnormalized
    /// Gaussian factor that dominates kernel expectations.
    fn gauss_factor(scale: Self, log_offset: Self, m: &[Self], c: &[Self], e: &[Self]) -> Self {
        let mut s = Self::zero();
        for ((&mi, &ci), &ei) in m.iter().zip(c).zip(e) {
            let r = mi - ci;
            s += ei * r * r;
        }
        scale * (log_offset - s).exp()
    }

    /// Larger of the two by primal value.
    fn max_val(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_real_float {
    ($($t:ty),*) => {$(
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn value(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                Float::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                Float::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                Float::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                Float::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                Float::abs(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                Float::powi(self, n)
            }
        }
    )*};
}

impl_real_float!(f32, f64);

/// Converts a slice of `f64` into any [`Real`].
pub fn lift<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64(x)).collect()
}

/// Primal values of a slice.
pub fn values<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.value()).collect()
}
