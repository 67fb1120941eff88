//! Scalar abstraction shared by the geometry, pooling and loss kernels.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Default + Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Infallible for the float types implemented here.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
