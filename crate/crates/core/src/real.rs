use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element type for tensors: f64 for verification, f32 for training.
///
/// Gradient checks require double precision; training runs and checkpoints
/// use single. Everything model-side is generic over this trait so the same
/// code serves both.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Display + Debug + Copy + Send + Sync + 'static
{
    /// Lossy conversion from f64 (panics only on NaN inputs we never produce).
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }

    /// Correctly-rounded decimal parse at this type's native precision.
    fn parse_text(s: &str) -> Option<Self>;
}

impl Real for f32 {
    fn parse_text(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Real for f64 {
    fn parse_text(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

/// Format with 6 significant digits, the convention for every emitted CSV.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}
