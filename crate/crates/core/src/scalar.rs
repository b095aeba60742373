use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating point type the numerical core is generic over.
///
/// Implemented for `f32` and `f64`. Special functions (log-gamma, digamma)
/// are evaluated in `f64` and cast back.
pub trait Scalar: NdFloat + FromPrimitive + Sum + for<'a> Sum<&'a Self> + Default {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar is representable as f64")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }

    /// `log(1 + exp(x))` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        if self > Self::of(30.0) {
            self
        } else {
            self.exp().ln_1p()
        }
    }

    /// Inverse of [`Scalar::softplus`] for positive arguments.
    #[inline]
    fn softplus_inv(self) -> Self {
        if self > Self::of(30.0) {
            self
        } else {
            self.exp_m1().ln()
        }
    }

    #[inline]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
