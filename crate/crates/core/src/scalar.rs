use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a run. Precision is chosen once per run:
/// `f32` for training and inference, `f64` for gradient verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Type tag written into checkpoints.
    const DTYPE: u8;
    const NAME: &'static str;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";
}
