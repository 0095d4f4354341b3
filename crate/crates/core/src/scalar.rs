use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by every numerical routine in the crate.
///
/// Transcendental functions come from [`RealField`]; conversions go through
/// `num-traits` so that constants can be written once as `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_usize_exact(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn neg_infinity() -> Self {
        Self::lit(f64::NEG_INFINITY)
    }

    fn is_neg_infinity(self) -> bool {
        self.to_f64_lossy() == f64::NEG_INFINITY
    }

    #[allow(clippy::eq_op)]
    fn is_nan_value(self) -> bool {
        self != self
    }

    fn is_pos_infinity(self) -> bool {
        self.to_f64_lossy() == f64::INFINITY
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for [`Real::lit`].
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::lit(x)
}
