//! Scalar abstraction over the two float widths the engine runs at.
//!
//! Production code paths (training, inference, file formats) use `f32`;
//! verification builds (finite-difference gradient checks, the exactness
//! smoke tests) instantiate the same code at `f64`. Everything numeric is
//! generic over [`Scalar`] so the two paths share one implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the math core is generic over.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` literals and accumulators.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every supported scalar")
    }

    /// Widening conversion used by accumulators that always run at f64.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("every supported scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean<S: Scalar>(xs: &[S]) -> S {
        let total: S = xs.iter().copied().sum();
        total / S::from_usize(xs.len()).unwrap()
    }

    #[test]
    fn generic_code_runs_at_both_widths() {
        assert_eq!(mean(&[1.0f32, 2.0, 3.0]), 2.0f32);
        assert_eq!(mean(&[1.0f64, 2.0, 3.0]), 2.0f64);
    }

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f32::from_f64_c(0.25).to_f64_c(), 0.25);
        assert_eq!(f64::from_f64_c(1e-12), 1e-12);
    }
}
