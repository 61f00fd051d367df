//! Scalar abstraction so the estimation machinery works for both `f32` and
//! `f64` (the simulation harness and CLI pin `f64`).

use nalgebra::RealField;
use num_traits::NumCast;

/// Floating-point scalar usable throughout the library.
pub trait Scalar:
    RealField + NumCast + Copy + Default + Send + Sync + std::iter::Sum + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 converts to scalar")
    }

    /// Lossy conversion to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar converts to f64")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
