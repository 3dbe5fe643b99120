//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point element type usable by the attention kernels.
///
/// Implemented for `f32` and `f64`. All combinatorial constants (multinomial
/// weights, scales) are produced in `f64` and converted once through [`Scalar::of`].
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Stabilizer added inside `log(|s| + eps)` on the log-space scoring path.
    const DEFAULT_EPSILON: f64;
    /// Short dtype name used in reports.
    const NAME: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }
}

impl Scalar for f32 {
    const DEFAULT_EPSILON: f64 = 1e-7;
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const DEFAULT_EPSILON: f64 = 1e-12;
    const NAME: &'static str = "f64";
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
