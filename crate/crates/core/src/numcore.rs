//! Dense real linear algebra primitives and Gaussian utilities.
//!
//! Everything is row-major and generic over [`Scalar`], so the same routines
//! serve the plain evaluation path and the differentiation path. Matrices
//! here are small: covariance blocks at the inducing inputs dominate, and
//! data only enters through minibatch rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm_sq, Scalar};

/// Default base jitter used when factorizing covariance matrices.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<S = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    /// Build from row-major data. Checks the shape/entry-count invariant and,
    /// for constructed values, finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.val().is_finite()) {
            return Err(Error::InvalidArgument(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Mat<S>) -> Result<Mat<S>> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Mat::from_fn(self.rows, rhs.cols, |i, j| {
            let mut acc = self.get(i, 0) * rhs.get(0, j);
            for k in 1..self.cols {
                acc = acc + self.get(i, k) * rhs.get(k, j);
            }
            acc
        }))
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[S]) -> Result<Vec<S>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "matvec: {}x{} * len {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| crate::scalar::dot(self.row(i), v))
            .collect())
    }

    /// A submatrix of selected rows.
    pub fn select_rows(&self, indices: &[usize]) -> Mat<S> {
        Mat::from_fn(indices.len(), self.cols, |i, j| self.get(indices[i], j))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.val().is_finite())
    }
}

impl Mat<f64> {
    /// Re-express the matrix in another scalar context, entry by entry, as
    /// constants. Used to bring fixed data (inputs, noise draws) onto a tape.
    pub fn lift<S: Scalar>(&self, anchor: S) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| anchor.lit(v)).collect(),
        }
    }
}

/// Lower-triangular Cholesky factor together with the jitter that was needed
/// and the log-determinant of the factored matrix.
#[derive(Clone, Debug)]
pub struct CholFactor<S = f64> {
    l: Mat<S>,
    jitter_used: f64,
    log_det: S,
}

impl<S: Scalar> CholFactor<S> {
    /// Wrap an existing lower-triangular factor with strictly positive
    /// diagonal (no factorization performed).
    pub fn from_lower(l: Mat<S>) -> Result<Self> {
        if l.rows() != l.cols() {
            return Err(Error::DimensionMismatch(format!(
                "factor must be square, got {}x{}",
                l.rows(),
                l.cols()
            )));
        }
        for i in 0..l.rows() {
            if l.get(i, i).val() <= 0.0 {
                return Err(Error::InvalidArgument(
                    "factor diagonal must be strictly positive".into(),
                ));
            }
            for j in i + 1..l.cols() {
                if l.get(i, j).val() != 0.0 {
                    return Err(Error::InvalidArgument(
                        "factor must be lower-triangular".into(),
                    ));
                }
            }
        }
        let log_det = log_det_of(&l);
        Ok(Self {
            l,
            jitter_used: 0.0,
            log_det,
        })
    }

    pub fn lower(&self) -> &Mat<S> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Jitter that was added to the diagonal before factorization succeeded.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// `log det(L L^T) = 2 * sum(log L_ii)`.
    pub fn log_det(&self) -> S {
        self.log_det
    }

    /// Reconstruct `L L^T`.
    pub fn reconstruct(&self) -> Mat<S> {
        let n = self.dim();
        Mat::from_fn(n, n, |i, j| {
            let k_max = i.min(j);
            let mut acc = self.l.get(i, 0) * self.l.get(j, 0);
            for k in 1..=k_max {
                acc = acc + self.l.get(i, k) * self.l.get(j, k);
            }
            acc
        })
    }
}

fn log_det_of<S: Scalar>(l: &Mat<S>) -> S {
    let mut acc = l.get(0, 0).ln();
    for i in 1..l.rows() {
        acc = acc + l.get(i, i).ln();
    }
    acc * 2.0
}

/// Cholesky factorization with geometric jitter escalation.
///
/// The input is symmetrized as `(A + A^T)/2` first. The jitter tried is the
/// smallest of `{0, base_jitter * 10^k, k = 0..6} * mean(diag A)` for which
/// the factorization succeeds; the winning value is reported in
/// [`CholFactor::jitter_used`]. The jitter is treated as a constant by the
/// differentiation path.
pub fn cholesky_jittered<S: Scalar>(a: &Mat<S>, base_jitter: f64) -> Result<CholFactor<S>> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.cols()
        )));
    }
    // Precondition: symmetric within 1e-8 relative tolerance.
    for i in 0..n {
        for j in 0..i {
            let x = a.get(i, j).val();
            let y = a.get(j, i).val();
            if (x - y).abs() > 1e-8 * (1.0 + x.abs().max(y.abs())) {
                return Err(Error::NotSymmetric);
            }
        }
    }
    let sym = Mat::from_fn(n, n, |i, j| (a.get(i, j) + a.get(j, i)) * 0.5);

    let mean_diag: f64 = (0..n).map(|i| sym.get(i, i).val()).sum::<f64>() / n as f64;
    let mut jitters = vec![0.0];
    for k in 0..=6 {
        jitters.push(base_jitter * 10f64.powi(k) * mean_diag);
    }

    for jitter in jitters {
        if let Some((l, log_det)) = try_factor(&sym, jitter) {
            return Ok(CholFactor {
                l,
                jitter_used: jitter,
                log_det,
            });
        }
    }
    Err(Error::NotPositiveDefinite)
}

fn try_factor<S: Scalar>(sym: &Mat<S>, jitter: f64) -> Option<(Mat<S>, S)> {
    let n = sym.rows();
    let anchor = sym.get(0, 0);
    let zero = anchor.lit(0.0);
    let mut l = Mat::from_fn(n, n, |_, _| zero);
    for j in 0..n {
        let mut d = sym.get(j, j) + jitter;
        for k in 0..j {
            let v = l.get(j, k);
            d = d - v * v;
        }
        if !(d.val() > 0.0) || !d.val().is_finite() {
            return None;
        }
        let pivot = d.sqrt();
        l.set(j, j, pivot);
        for i in j + 1..n {
            let mut s = sym.get(i, j);
            for k in 0..j {
                s = s - l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / pivot);
        }
    }
    let log_det = log_det_of(&l);
    Some((l, log_det))
}

/// Solve `L X = B` (or `L^T X = B` when `transpose` is set) for a
/// lower-triangular factor.
pub fn tri_solve<S: Scalar>(l: &CholFactor<S>, b: &Mat<S>, transpose: bool) -> Result<Mat<S>> {
    let n = l.dim();
    if b.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "tri_solve: factor is {n}x{n} but rhs has {} rows",
            b.rows()
        )));
    }
    let mut x = b.clone();
    let lm = l.lower();
    if !transpose {
        for c in 0..x.cols() {
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s = s - lm.get(i, k) * x.get(k, c);
                }
                x.set(i, c, s / lm.get(i, i));
            }
        }
    } else {
        for c in 0..x.cols() {
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in i + 1..n {
                    s = s - lm.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s / lm.get(i, i));
            }
        }
    }
    Ok(x)
}

/// Vector convenience wrapper around [`tri_solve`].
pub fn tri_solve_vec<S: Scalar>(l: &CholFactor<S>, b: &[S], transpose: bool) -> Result<Vec<S>> {
    let mat = Mat::new(b.len(), 1, b.to_vec())?;
    let x = tri_solve(l, &mat, transpose)?;
    Ok(x.data().to_vec())
}

/// KL divergence between a Gaussian `N(m, S S^T)` and a zero-mean Gaussian
/// prior `N(0, K K^T)`, both given by lower-triangular factors:
///
/// `KL = 1/2 [ ||K_L^{-1} S_L||_F^2 + ||K_L^{-1} m||^2 - M
///             + log det(K K^T) - log det(S S^T) ]`
pub fn gauss_kl<S: Scalar>(m: &[S], s: &CholFactor<S>, k: &CholFactor<S>) -> Result<S> {
    let dim = k.dim();
    if s.dim() != dim || m.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "gauss_kl: m has {} entries, S is {}x{}, K is {dim}x{dim}",
            m.len(),
            s.dim(),
            s.dim()
        )));
    }
    let a = tri_solve(k, s.lower(), false)?;
    let b = tri_solve_vec(k, m, false)?;
    let trace = norm_sq(a.data());
    let maha = norm_sq(&b);
    Ok((trace + maha - dim as f64 + (k.log_det() - s.log_det())) * 0.5)
}
