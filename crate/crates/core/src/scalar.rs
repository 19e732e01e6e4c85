use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the differentiable compute layer.
///
/// Production code runs in `f32` (the checkpoint payload type); gradient
/// verification instantiates the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
