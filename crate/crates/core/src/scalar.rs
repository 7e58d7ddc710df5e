use std::fmt::Debug;

use num_traits::{Float, FloatConst, NumAssign};
use rustfft::FftNum;

/// Floating point sample type used by the image, kernel and projection code.
///
/// Implemented for `f32` and `f64`. The acceptance tolerances assume `f64`.
pub trait Scalar:
    Float + FloatConst + NumAssign + FftNum + Default + Debug + Send + Sync + 'static
{
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from(v).unwrap()
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl<T> Scalar for T where
    T: Float + FloatConst + NumAssign + FftNum + Default + Debug + Send + Sync + 'static
{
}
