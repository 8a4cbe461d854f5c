use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
///
/// Everything downstream of the file formats (which are always parsed as
/// `f64`) can run in either precision; the crate root exports `f64` aliases
/// for the common types.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` literal into the scalar type.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
