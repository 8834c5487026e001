//! Scalar abstraction shared by the plain `f64` evaluation path and the
//! reverse-mode tape of [`crate::diff`].
//!
//! Every numeric routine in this crate is written once, generically over
//! [`Scalar`]. Instantiated at `f64` it is the fast forward path;
//! instantiated at [`crate::diff::Var`] the identical sequence of operations
//! is recorded on a tape and can be differentiated. Because both paths run
//! the same code, objective values agree bit for bit.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// A real number supporting the arithmetic the model needs.
///
/// `lit` produces a constant "in the same context" as `self`: for `f64` it is
/// the value itself, for a tape variable it is a fresh node with no parents,
/// so no gradient flows into it.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Current numeric value.
    fn val(self) -> f64;

    /// A constant with the given value, in the same context as `self`.
    fn lit(self, value: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;

    /// `max(self, 0)` with zero derivative on the clamped branch.
    fn clamp_min_zero(self) -> Self {
        if self.val() >= 0.0 {
            self
        } else {
            self.lit(0.0)
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn val(self) -> f64 {
        self
    }

    #[inline]
    fn lit(self, value: f64) -> Self {
        value
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Sum of an iterator of scalars, starting from a zero constant tied to
/// `anchor`'s context. Summation order follows the iterator, so results are
/// reproducible.
pub fn sum<S: Scalar>(anchor: S, items: impl IntoIterator<Item = S>) -> S {
    items
        .into_iter()
        .fold(anchor.lit(0.0), |acc, item| acc + item)
}

/// Dot product of two slices. Panics if lengths differ.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    assert!(!a.is_empty(), "dot: empty slices");
    let mut acc = a[0] * b[0];
    for k in 1..a.len() {
        acc = acc + a[k] * b[k];
    }
    acc
}

/// Squared Euclidean norm of a slice.
pub fn norm_sq<S: Scalar>(a: &[S]) -> S {
    assert!(!a.is_empty(), "norm_sq: empty slice");
    let mut acc = a[0] * a[0];
    for &x in &a[1..] {
        acc = acc + x * x;
    }
    acc
}
