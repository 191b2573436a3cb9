//! Scalar abstraction for the numeric layer.
//!
//! Vector math, clustering, span scoring, and the rating predictor are
//! generic over [`Real`] so they instantiate at `f32` or `f64`. The pipeline
//! binaries run everything at `f64`; the crate root exports the concrete
//! aliases.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by every numeric routine in this crate.
///
/// Blanket-implemented for any type with the listed bounds, which in
/// practice means `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts to any Real")
    }

    fn from_usize_lossy(value: usize) -> Self {
        Self::from_usize(value).expect("usize converts to any Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("any Real converts to f64")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssign + std::fmt::Debug + Send + Sync + 'static
{
}
