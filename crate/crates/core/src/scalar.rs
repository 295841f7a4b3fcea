use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the estimators are generic over: `f32` or `f64`.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Values outside the range of `Self` saturate to infinity.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Smallest tolerance worth asking a solver for at this precision.
    fn tol_floor() -> Self {
        Self::epsilon() * Self::lit(64.0)
    }
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
}

pub(crate) fn soft_threshold<T: Real>(z: T, t: T) -> T {
    // exact ties at the threshold go to zero
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        T::zero()
    }
}
