use std::fmt;

use num_traits::Float;

/// Element type of the numeric kernels: `f32` on the standard path,
/// `f64` on the verification path.
pub trait Scalar: Float + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    /// Named to avoid clashing with `num_traits::ToPrimitive::to_f64`.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Lower clamp applied to sigmoid outputs so the entropy path never sees
/// an exact 0 or 1.
pub const SIGMOID_CLAMP: f64 = 1e-7;

/// Elementwise logistic sigmoid, clamped to `[1e-7, 1 - 1e-7]`.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = one / (one + (-x).exp());
    let lo = T::from_f64(SIGMOID_CLAMP);
    let hi = one - lo;
    if y < lo {
        lo
    } else if y > hi {
        hi
    } else {
        y
    }
}

/// Derivative of the clamped sigmoid expressed through its output:
/// `y * (1 - y)` on the interior, zero on the clamped flats where the
/// function is locally constant. Using the unclamped form there would
/// leak a spurious ~1e-7 into every upstream gradient.
#[inline]
pub fn sigmoid_grad_from_output<T: Scalar>(y: T) -> T {
    let lo = T::from_f64(SIGMOID_CLAMP);
    let hi = T::one() - lo;
    if y <= lo || y >= hi {
        T::zero()
    } else {
        y * (T::one() - y)
    }
}
