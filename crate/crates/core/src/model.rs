//! Variational state containers and the closed-form Gaussian
//! conditional/marginal machinery of the sparse model.
//!
//! All latent processes share one set of inducing inputs `Z`. Each sparse
//! process carries a Gaussian variational factor over its inducing values,
//! parameterized by a mean vector and a lower-triangular covariance factor.
//! Factors store their diagonal in log space so that positivity survives
//! unconstrained gradient updates and packing round-trips exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gibbs_matrix, rbf_matrix, GibbsEval, RbfKernel};
use crate::numcore::{cholesky_jittered, tri_solve, CholFactor, Mat, DEFAULT_JITTER};
use crate::scalar::{dot, norm_sq, Scalar};

/// Index of pair `(i, j)` with `i >= j` in the canonical lower-triangular
/// ordering `(0,0), (1,0), (1,1), (2,0), ...`.
pub fn pair_index(i: usize, j: usize) -> usize {
    debug_assert!(i >= j);
    i * (i + 1) / 2 + j
}

/// Number of lower-triangular pairs for `d` outputs.
pub fn pair_count(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Iterate pairs `(i, j)`, `i >= j`, in canonical order.
pub fn pairs(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

/// Shared inducing inputs (rows are points).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InducingSet<S = f64> {
    z: Mat<S>,
}

impl<S: Scalar> InducingSet<S> {
    /// Validates that there is at least one point and no (near-)duplicate
    /// rows (pairwise distance > 1e-10).
    pub fn new(z: Mat<S>) -> Result<Self> {
        if z.rows() == 0 {
            return Err(Error::InvalidArgument(
                "need at least one inducing input".into(),
            ));
        }
        for i in 0..z.rows() {
            for j in 0..i {
                let d2: f64 = (0..z.cols())
                    .map(|p| (z.get(i, p).val() - z.get(j, p).val()).powi(2))
                    .sum();
                if d2.sqrt() <= 1e-10 {
                    return Err(Error::DuplicateInducingInputs);
                }
            }
        }
        Ok(Self { z })
    }

    pub fn points(&self) -> &Mat<S> {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.z.cols()
    }
}

/// One Gaussian variational factor `N(m, S S^T)` with `S` lower-triangular.
///
/// Internally the factor is stored packed (row-major lower triangle) with the
/// diagonal in log space; [`VariationalGaussian::factor`] materializes the
/// positive-diagonal triangular matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariationalGaussian<S = f64> {
    m: Vec<S>,
    raw: Vec<S>,
    dim: usize,
}

impl VariationalGaussian<f64> {
    /// Build from a mean and an explicit lower-triangular factor with
    /// strictly positive diagonal.
    pub fn from_mean_and_factor(m: Vec<f64>, factor: &Mat<f64>) -> Result<Self> {
        let dim = m.len();
        if factor.rows() != dim || factor.cols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "factor is {}x{} but mean has {} entries",
                factor.rows(),
                factor.cols(),
                dim
            )));
        }
        let mut raw = Vec::with_capacity(pair_count(dim));
        for i in 0..dim {
            for j in i + 1..dim {
                if factor.get(i, j) != 0.0 {
                    return Err(Error::InvalidArgument(
                        "covariance factor must be lower-triangular".into(),
                    ));
                }
            }
            for j in 0..=i {
                if i == j {
                    let d = factor.get(i, i);
                    if !(d > 0.0) || !d.is_finite() {
                        return Err(Error::InvalidArgument(
                            "covariance factor diagonal must be strictly positive".into(),
                        ));
                    }
                    raw.push(d.ln());
                } else {
                    raw.push(factor.get(i, j));
                }
            }
        }
        Ok(Self { m, raw, dim })
    }
}

impl<S: Scalar> VariationalGaussian<S> {
    /// Rebuild from the packed representation (strict-lower entries raw,
    /// diagonal in log space).
    pub fn from_raw(m: Vec<S>, raw: Vec<S>) -> Result<Self> {
        let dim = m.len();
        if raw.len() != pair_count(dim) {
            return Err(Error::DimensionMismatch(format!(
                "packed factor has {} entries, expected {}",
                raw.len(),
                pair_count(dim)
            )));
        }
        Ok(Self { m, raw, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[S] {
        &self.m
    }

    /// Packed factor storage (strict-lower raw, diagonal log).
    pub fn raw(&self) -> &[S] {
        &self.raw
    }

    /// The lower-triangular covariance factor with positive diagonal.
    pub fn factor(&self) -> Mat<S> {
        let zero = self.m[0].lit(0.0);
        Mat::from_fn(self.dim, self.dim, |i, j| {
            if j > i {
                zero
            } else if i == j {
                self.raw[pair_index(i, i)].exp()
            } else {
                self.raw[pair_index(i, j)]
            }
        })
    }

    /// Factor wrapped for triangular solves.
    pub fn chol(&self) -> CholFactor<S> {
        CholFactor::from_lower(self.factor()).expect("stored factor is valid by construction")
    }
}

/// Which parameters move during training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainableFlags {
    pub sigma2_err: bool,
    pub variance_l: bool,
    pub lengthscale_l: bool,
    pub variance_ell: bool,
    pub lengthscale_ell: bool,
    pub inducing_inputs: bool,
}

impl Default for TrainableFlags {
    fn default() -> Self {
        // Lengthscales of the coefficient and log-lengthscale kernels are
        // held fixed by default; they are the sensitive knobs and are set per
        // experiment. Inducing inputs stay on a fixed grid.
        Self {
            sigma2_err: true,
            variance_l: true,
            lengthscale_l: false,
            variance_ell: true,
            lengthscale_ell: false,
            inducing_inputs: false,
        }
    }
}

/// Noise variance and kernel hyperparameters, stored in log space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperParams<S = f64> {
    log_sigma2_err: S,
    log_variance_l: S,
    log_lengthscale_l: S,
    log_variance_ell: S,
    log_lengthscale_ell: S,
    pub trainable: TrainableFlags,
}

impl HyperParams<f64> {
    pub fn new(sigma2_err: f64, theta_l: RbfKernel, theta_ell: RbfKernel) -> Result<Self> {
        if !(sigma2_err > 0.0 && sigma2_err.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise variance must be strictly positive and finite".into(),
            ));
        }
        Ok(Self {
            log_sigma2_err: sigma2_err.ln(),
            log_variance_l: theta_l.variance.ln(),
            log_lengthscale_l: theta_l.lengthscale.ln(),
            log_variance_ell: theta_ell.variance.ln(),
            log_lengthscale_ell: theta_ell.lengthscale.ln(),
            trainable: TrainableFlags::default(),
        })
    }

    pub fn with_trainable(mut self, trainable: TrainableFlags) -> Self {
        self.trainable = trainable;
        self
    }
}

impl<S: Scalar> HyperParams<S> {
    pub fn from_logs(logs: [S; 5], trainable: TrainableFlags) -> Self {
        Self {
            log_sigma2_err: logs[0],
            log_variance_l: logs[1],
            log_lengthscale_l: logs[2],
            log_variance_ell: logs[3],
            log_lengthscale_ell: logs[4],
            trainable,
        }
    }

    pub fn logs(&self) -> [S; 5] {
        [
            self.log_sigma2_err,
            self.log_variance_l,
            self.log_lengthscale_l,
            self.log_variance_ell,
            self.log_lengthscale_ell,
        ]
    }

    pub fn sigma2_err(&self) -> S {
        self.log_sigma2_err.exp()
    }

    /// Kernel of the coefficient processes.
    pub fn theta_l(&self) -> RbfKernel<S> {
        RbfKernel {
            variance: self.log_variance_l.exp(),
            lengthscale: self.log_lengthscale_l.exp(),
        }
    }

    /// Kernel of the log-lengthscale process.
    pub fn theta_ell(&self) -> RbfKernel<S> {
        RbfKernel {
            variance: self.log_variance_ell.exp(),
            lengthscale: self.log_lengthscale_ell.exp(),
        }
    }
}

/// The full variational state: inducing inputs plus the Gaussian factors for
/// the coefficient processes (`q_u`, one per lower-triangular pair), the
/// latent outputs (`q_w`, one per output), and the log-lengthscale process
/// (`q_v`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariationalState<S = f64> {
    z: InducingSet<S>,
    q_u: Vec<VariationalGaussian<S>>,
    q_w: Vec<VariationalGaussian<S>>,
    q_v: VariationalGaussian<S>,
    d_outputs: usize,
}

impl<S: Scalar> VariationalState<S> {
    pub fn new(
        z: InducingSet<S>,
        q_u: Vec<VariationalGaussian<S>>,
        q_w: Vec<VariationalGaussian<S>>,
        q_v: VariationalGaussian<S>,
    ) -> Result<Self> {
        let d_outputs = q_w.len();
        if d_outputs == 0 {
            return Err(Error::InvalidArgument("need at least one output".into()));
        }
        if q_u.len() != pair_count(d_outputs) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} coefficient factors for {} outputs, got {}",
                pair_count(d_outputs),
                d_outputs,
                q_u.len()
            )));
        }
        let m = z.len();
        for g in q_u.iter().chain(q_w.iter()).chain(std::iter::once(&q_v)) {
            if g.dim() != m {
                return Err(Error::DimensionMismatch(format!(
                    "all factors must share the inducing count {m}, got {}",
                    g.dim()
                )));
            }
        }
        Ok(Self {
            z,
            q_u,
            q_w,
            q_v,
            d_outputs,
        })
    }

    pub fn inducing(&self) -> &InducingSet<S> {
        &self.z
    }

    pub fn num_inducing(&self) -> usize {
        self.z.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.d_outputs
    }

    /// Factor for coefficient `(i, j)`, `i >= j`.
    pub fn q_u(&self, i: usize, j: usize) -> &VariationalGaussian<S> {
        &self.q_u[pair_index(i, j)]
    }

    pub fn q_u_all(&self) -> &[VariationalGaussian<S>] {
        &self.q_u
    }

    pub fn q_w(&self, d: usize) -> &VariationalGaussian<S> {
        &self.q_w[d]
    }

    pub fn q_w_all(&self) -> &[VariationalGaussian<S>] {
        &self.q_w
    }

    pub fn q_v(&self) -> &VariationalGaussian<S> {
        &self.q_v
    }

    /// Some scalar in this state's evaluation context, for creating
    /// constants.
    pub fn anchor(&self) -> S {
        self.q_v.mean()[0]
    }
}

/// A kernel bound to whatever side data it needs on a pair of point sets.
///
/// For the Gibbs kernel the lengthscales must be supplied aligned with the
/// rows of the point sets the evaluator is applied to.
#[derive(Clone, Copy, Debug)]
pub enum KernelOn<'a, S: Scalar = f64> {
    Rbf(&'a RbfKernel<S>),
    Gibbs {
        ell_x: &'a [S],
        ell_z: &'a [S],
    },
}

impl<S: Scalar> KernelOn<'_, S> {
    /// Cross-covariance `K(X, Z)`.
    pub fn cross(&self, x: &Mat<S>, z: &Mat<S>) -> Result<Mat<S>> {
        match self {
            KernelOn::Rbf(k) => rbf_matrix(x, z, k),
            KernelOn::Gibbs { ell_x, ell_z } => gibbs_matrix(&GibbsEval {
                inputs_a: x,
                lengthscales_a: ell_x,
                inputs_b: z,
                lengthscales_b: ell_z,
            }),
        }
    }

    /// Full covariance `K(X, X)`.
    pub fn full_x(&self, x: &Mat<S>) -> Result<Mat<S>> {
        match self {
            KernelOn::Rbf(k) => rbf_matrix(x, x, k),
            KernelOn::Gibbs { ell_x, .. } => gibbs_matrix(&GibbsEval {
                inputs_a: x,
                lengthscales_a: ell_x,
                inputs_b: x,
                lengthscales_b: ell_x,
            }),
        }
    }

    /// Covariance at the inducing inputs `K(Z, Z)`.
    pub fn full_z(&self, z: &Mat<S>) -> Result<Mat<S>> {
        match self {
            KernelOn::Rbf(k) => rbf_matrix(z, z, k),
            KernelOn::Gibbs { ell_z, .. } => gibbs_matrix(&GibbsEval {
                inputs_a: z,
                lengthscales_a: ell_z,
                inputs_b: z,
                lengthscales_b: ell_z,
            }),
        }
    }

    /// Per-point prior variance `K(x, x)`.
    pub fn diag_x(&self, x: &Mat<S>, anchor: S) -> Vec<S> {
        match self {
            KernelOn::Rbf(k) => vec![k.variance; x.rows()],
            // The Gibbs correlation is exactly one at coincident points.
            KernelOn::Gibbs { .. } => vec![anchor.lit(1.0); x.rows()],
        }
    }
}

/// Prior conditional of a sparse GP given its values at the inducing inputs:
/// mean `K(X,Z) K(Z,Z)^{-1} v`, covariance
/// `K(X,X) - K(X,Z) K(Z,Z)^{-1} K(Z,X)`.
pub fn prior_conditional_moments<S: Scalar>(
    kernel: &KernelOn<'_, S>,
    x: &Mat<S>,
    z: &InducingSet<S>,
    vals: &[S],
) -> Result<(Vec<S>, Mat<S>)> {
    if vals.len() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "conditioning values: expected {}, got {}",
            z.len(),
            vals.len()
        )));
    }
    let kzz = kernel.full_z(z.points())?;
    let chol = cholesky_jittered(&kzz, DEFAULT_JITTER)?;
    let kxz = kernel.cross(x, z.points())?;
    // a = L^{-1} K(Z, X), column i belongs to x_i
    let a = tri_solve(&chol, &kxz.transpose(), false)?;
    let c = crate::numcore::tri_solve_vec(&chol, vals, false)?;
    let mean: Vec<S> = (0..x.rows())
        .map(|i| {
            let col: Vec<S> = (0..z.len()).map(|r| a.get(r, i)).collect();
            dot(&col, &c)
        })
        .collect();
    let kxx = kernel.full_x(x)?;
    let cov = Mat::from_fn(x.rows(), x.rows(), |i, j| {
        let mut acc = kxx.get(i, j);
        for r in 0..z.len() {
            acc = acc - a.get(r, i) * a.get(r, j);
        }
        acc
    });
    Ok((mean, cov))
}

/// Covariance output of [`variational_marginal_moments`].
#[derive(Clone, Debug)]
pub enum MarginalCov<S = f64> {
    Full(Mat<S>),
    Diag(Vec<S>),
}

impl<S: Scalar> MarginalCov<S> {
    pub fn diagonal(&self) -> Vec<S> {
        match self {
            MarginalCov::Full(m) => (0..m.rows()).map(|i| m.get(i, i)).collect(),
            MarginalCov::Diag(v) => v.clone(),
        }
    }
}

/// Marginal of a sparse GP after integrating its inducing values against a
/// Gaussian factor `q = N(m, S S^T)`:
///
/// mean `K(X,Z) K(Z,Z)^{-1} m`,
/// cov  `K(X,X) - K(X,Z) K(Z,Z)^{-1} K(Z,X)
///       + K(X,Z) K(Z,Z)^{-1} S S^T K(Z,Z)^{-1} K(Z,X)`.
///
/// With `diag_only` set, only per-point variances are formed.
pub fn variational_marginal_moments<S: Scalar>(
    kernel: &KernelOn<'_, S>,
    x: &Mat<S>,
    z: &InducingSet<S>,
    q: &VariationalGaussian<S>,
    diag_only: bool,
) -> Result<(Vec<S>, MarginalCov<S>)> {
    if q.dim() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "factor dimension {} does not match inducing count {}",
            q.dim(),
            z.len()
        )));
    }
    let kzz = kernel.full_z(z.points())?;
    let chol = cholesky_jittered(&kzz, DEFAULT_JITTER)?;
    let kxz = kernel.cross(x, z.points())?;
    let a = tri_solve(&chol, &kxz.transpose(), false)?; // M x n
    let b = tri_solve(&chol, &a, true)?; // K(Z,Z)^{-1} K(Z,X), M x n
    let c = crate::numcore::tri_solve_vec(&chol, q.mean(), false)?;
    let m = z.len();
    let n = x.rows();
    let mean: Vec<S> = (0..n)
        .map(|i| {
            let col: Vec<S> = (0..m).map(|r| a.get(r, i)).collect();
            dot(&col, &c)
        })
        .collect();
    let s_factor = q.factor();
    // g_i = S^T b_i gives the quadratic correction ||g_i||^2.
    let g = s_factor.transpose().matmul(&b)?;
    if diag_only {
        let anchor = q.mean()[0];
        let kdiag = kernel.diag_x(x, anchor);
        let vars: Vec<S> = (0..n)
            .map(|i| {
                let a_col: Vec<S> = (0..m).map(|r| a.get(r, i)).collect();
                let g_col: Vec<S> = (0..m).map(|r| g.get(r, i)).collect();
                kdiag[i] - norm_sq(&a_col) + norm_sq(&g_col)
            })
            .collect();
        Ok((mean, MarginalCov::Diag(vars)))
    } else {
        let kxx = kernel.full_x(x)?;
        let cov = Mat::from_fn(n, n, |i, j| {
            let mut acc = kxx.get(i, j);
            for r in 0..m {
                acc = acc - a.get(r, i) * a.get(r, j) + g.get(r, i) * g.get(r, j);
            }
            acc
        });
        Ok((mean, MarginalCov::Full(cov)))
    }
}

/// Serializable bundle of everything a trained model needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub state: VariationalState,
    pub hypers: HyperParams,
}

impl ModelState {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let state: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        Ok(state)
    }
}
