//! Scalar types the dense kernels are generic over.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Num, Signed};

/// Element type of a [`DenseMatrix`](crate::ffn_check::DenseMatrix).
///
/// Implemented for `f32`, `f64` and exact rationals, so the same kernels run
/// in floating point and in exact arithmetic.
pub trait Scalar: Num + Signed + Clone + PartialOrd + Debug {
    /// False for NaN and infinities; always true for exact types.
    fn is_finite_value(&self) -> bool;
    fn from_f64_lossy(x: f64) -> Option<Self>;
    fn to_f64_lossy(&self) -> f64;
}

impl Scalar for f64 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn from_f64_lossy(x: f64) -> Option<Self> {
        Some(x)
    }
    fn to_f64_lossy(&self) -> f64 {
        *self
    }
}

impl Scalar for f32 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn from_f64_lossy(x: f64) -> Option<Self> {
        Some(x as f32)
    }
    fn to_f64_lossy(&self) -> f64 {
        *self as f64
    }
}

macro_rules! impl_rational {
    ($int:ty) => {
        impl Scalar for Ratio<$int> {
            fn is_finite_value(&self) -> bool {
                true
            }
            fn from_f64_lossy(x: f64) -> Option<Self> {
                Ratio::<$int>::approximate_float(x)
            }
            fn to_f64_lossy(&self) -> f64 {
                *self.numer() as f64 / *self.denom() as f64
            }
        }
    };
}

impl_rational!(i64);
impl_rational!(i128);
