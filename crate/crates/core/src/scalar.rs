use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the whole crate is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tolerance for unit-norm checks on quaternions and directions.
    const UNIT_TOL: f64;
    /// Tolerance for `RᵀR = I` checks on camera rotations.
    const ORTHO_TOL: f64;

    /// Converts an `f64` literal into this scalar.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 value representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn count(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize representable in scalar type")
    }
}

impl Scalar for f32 {
    const UNIT_TOL: f64 = 1e-5;
    const ORTHO_TOL: f64 = 1e-5;
}

impl Scalar for f64 {
    const UNIT_TOL: f64 = 1e-9;
    const ORTHO_TOL: f64 = 1e-8;
}

/// Lossy element-wise conversion between scalar types.
pub fn convert_slice<A: Scalar, B: Scalar>(src: &[A]) -> Vec<B> {
    src.iter().map(|&v| B::lit(v.as_f64())).collect()
}
