//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point type the model and inference code is generic over.
///
/// Implemented for `f32` and `f64`. The acceptance tolerances are stated for
/// `f64`; `f32` builds run the same algorithms at reduced precision.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Significant decimal digits needed for a bit-exact text round trip.
    fn round_trip_digits() -> usize;
}

impl Real for f64 {
    fn round_trip_digits() -> usize {
        17
    }
}

impl Real for f32 {
    fn round_trip_digits() -> usize {
        9
    }
}

/// Formats `x` in scientific notation with enough digits to parse back
/// bit-exactly.
pub fn format_real<T: Real>(x: T) -> String {
    format!("{:.*e}", T::round_trip_digits() - 1, x)
}
