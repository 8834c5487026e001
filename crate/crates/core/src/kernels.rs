//! Covariance functions: the stationary RBF kernel used for the coefficient
//! and lengthscale processes, and the nonstationary Gibbs correlation
//! function whose lengthscale varies over the input space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Mat;
use crate::scalar::Scalar;

/// Squared-exponential kernel
/// `k(x, x') = variance * exp(-||x - x'||^2 / (2 * lengthscale^2))`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RbfKernel<S = f64> {
    pub variance: S,
    pub lengthscale: S,
}

impl RbfKernel<f64> {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !(lengthscale > 0.0 && lengthscale.is_finite())
        {
            return Err(Error::InvalidArgument(
                "RBF variance and lengthscale must be strictly positive and finite".into(),
            ));
        }
        Ok(Self {
            variance,
            lengthscale,
        })
    }
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let d0 = a[0] - b[0];
    let mut acc = d0 * d0;
    for k in 1..a.len() {
        let d = a[k] - b[k];
        acc = acc + d * d;
    }
    acc
}

/// Evaluate the RBF kernel on all pairs from two point sets (rows are points).
pub fn rbf_matrix<S: Scalar>(x: &Mat<S>, x2: &Mat<S>, k: &RbfKernel<S>) -> Result<Mat<S>> {
    if x.cols() != x2.cols() {
        return Err(Error::DimensionMismatch(format!(
            "rbf_matrix: input dims {} vs {}",
            x.cols(),
            x2.cols()
        )));
    }
    let inv_two_ls2 = {
        let ls2 = k.lengthscale * k.lengthscale;
        (ls2 * 2.0).powi(-1)
    };
    Ok(Mat::from_fn(x.rows(), x2.rows(), |i, j| {
        let d2 = sq_dist(x.row(i), x2.row(j));
        k.variance * (-(d2 * inv_two_ls2)).exp()
    }))
}

/// One evaluation of the Gibbs correlation function: two point sets, each
/// point carrying its own lengthscale.
#[derive(Clone, Copy, Debug)]
pub struct GibbsEval<'a, S = f64> {
    pub inputs_a: &'a Mat<S>,
    pub lengthscales_a: &'a [S],
    pub inputs_b: &'a Mat<S>,
    pub lengthscales_b: &'a [S],
}

/// Gibbs correlation matrix: entry `(i, j)` is
///
/// `sqrt(2 l_i l_j / (l_i^2 + l_j^2)) * exp(-||x_i - x_j||^2 / (l_i^2 + l_j^2))`.
///
/// This is a pure correlation function (unit value at coincident points with
/// equal lengthscales); any output scale is carried by the coefficient
/// process. With a constant lengthscale it reduces to the unit-variance RBF.
pub fn gibbs_matrix<S: Scalar>(e: &GibbsEval<'_, S>) -> Result<Mat<S>> {
    if e.inputs_a.cols() != e.inputs_b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "gibbs_matrix: input dims {} vs {}",
            e.inputs_a.cols(),
            e.inputs_b.cols()
        )));
    }
    if e.lengthscales_a.len() != e.inputs_a.rows() || e.lengthscales_b.len() != e.inputs_b.rows() {
        return Err(Error::DimensionMismatch(
            "gibbs_matrix: lengthscale vectors must match their point sets".into(),
        ));
    }
    if e.lengthscales_a
        .iter()
        .chain(e.lengthscales_b.iter())
        .any(|l| !(l.val() > 0.0) || !l.val().is_finite())
    {
        return Err(Error::NonPositiveLengthscale);
    }
    Ok(Mat::from_fn(e.inputs_a.rows(), e.inputs_b.rows(), |i, j| {
        let li = e.lengthscales_a[i];
        let lj = e.lengthscales_b[j];
        let denom = li * li + lj * lj;
        let prefactor = (li * lj * 2.0 / denom).sqrt();
        let d2 = sq_dist(e.inputs_a.row(i), e.inputs_b.row(j));
        prefactor * (-(d2 / denom)).exp()
    }))
}
