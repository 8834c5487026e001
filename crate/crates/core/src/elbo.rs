//! Reparameterized sampling of the latent processes and the stochastic
//! evidence lower bound.
//!
//! The bound decomposes as a data term minus the KL divergences of the
//! variational factors from their priors. The data term is estimated over a
//! minibatch with fresh standard-normal draws (all randomness is expressed as
//! deterministic transforms of those draws), for two per-datum estimators:
//!
//! - `Direct`: sample the latent outputs `g` and evaluate the Gaussian
//!   log-density at the sampled mixture.
//! - `Marginalized`: integrate `g` analytically, leaving a quadratic
//!   correction; lower variance since the `g` noise never enters.
//!
//! Everything here is generic over [`Scalar`], so [`elbo_with_noise`] is the
//! single forward pass both evaluated (at `f64`) and differentiated (on the
//! tape). The split between drawing noise and consuming it is what makes
//! seeded values and gradients agree bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{pair_count, pairs, HyperParams, KernelOn, VariationalGaussian, VariationalState};
use crate::numcore::{cholesky_jittered, gauss_kl, tri_solve, tri_solve_vec, CholFactor, Mat, DEFAULT_JITTER};
use crate::scalar::{dot, norm_sq, Scalar};

const LN_2PI: f64 = 1.8378770664093453;

/// Which per-datum expectation estimator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Direct,
    Marginalized,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Estimator::Direct),
            "marginalized" => Ok(Estimator::Marginalized),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator `{other}` (expected direct or marginalized)"
            ))),
        }
    }
}

/// Count of conditional variances that came out below -1e-6 before clamping.
static NEG_VAR_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Diagnostics: how many conditional variances were clamped from values
/// below -1e-6 since the last reset.
pub fn negative_variance_warnings() -> u64 {
    NEG_VAR_WARNINGS.load(Ordering::Relaxed)
}

pub fn reset_negative_variance_warnings() {
    NEG_VAR_WARNINGS.store(0, Ordering::Relaxed);
}

/// Floor applied to conditional variances before square roots. A value this
/// small is zero at the model's working precision, but keeping it strictly
/// positive bounds the derivative of the square root; conditional variances
/// hit zero exactly whenever a batch point coincides with an inducing input.
const VAR_FLOOR: f64 = 1e-12;

fn clamp_variance<S: Scalar>(v: S) -> S {
    if v.val() < -1e-6 {
        NEG_VAR_WARNINGS.fetch_add(1, Ordering::Relaxed);
    }
    if v.val() < VAR_FLOOR {
        v.lit(VAR_FLOOR)
    } else {
        v
    }
}

/// All standard-normal draws used by one latent sample of a batch.
///
/// Layout: `z_l[n * pairs + p]` is the draw for coefficient pair `p` at batch
/// position `n`; `z_g[n * d + j]` the draw for latent output `j`. `z_g` is
/// drawn for both estimators (the marginalized one ignores it), so the two
/// estimators consume identical random streams.
#[derive(Clone, Debug)]
pub struct BatchNoise {
    pub z_v: Vec<f64>,
    pub z_ell: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_g: Vec<f64>,
}

impl BatchNoise {
    /// Draw all noise for a batch of `batch_len` points. Order: `z_v`, then
    /// per point `z_ell`, the coefficient draws, the latent-output draws.
    pub fn draw(m_inducing: usize, batch_len: usize, d_outputs: usize, rng: &mut impl Rng) -> Self {
        let p = pair_count(d_outputs);
        let mut z_v = Vec::with_capacity(m_inducing);
        for _ in 0..m_inducing {
            z_v.push(rng.sample::<f64, _>(StandardNormal));
        }
        let mut z_ell = Vec::with_capacity(batch_len);
        let mut z_l = Vec::with_capacity(batch_len * p);
        let mut z_g = Vec::with_capacity(batch_len * d_outputs);
        for _ in 0..batch_len {
            z_ell.push(rng.sample::<f64, _>(StandardNormal));
            for _ in 0..p {
                z_l.push(rng.sample::<f64, _>(StandardNormal));
            }
            for _ in 0..d_outputs {
                z_g.push(rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self { z_v, z_ell, z_l, z_g }
    }
}

/// The bound and its pieces. `elbo` always equals
/// `expected_loglik - (kl_u + kl_w + kl_v)` by construction.
#[derive(Clone, Copy, Debug)]
pub struct ElboBreakdown<S = f64> {
    pub expected_loglik: S,
    pub kl_u: S,
    pub kl_w: S,
    pub kl_v: S,
    pub elbo: S,
}

impl<S: Scalar> ElboBreakdown<S> {
    fn assemble(expected_loglik: S, kl_u: S, kl_w: S, kl_v: S) -> Self {
        Self {
            expected_loglik,
            kl_u,
            kl_w,
            kl_v,
            elbo: expected_loglik - (kl_u + kl_w + kl_v),
        }
    }
}

// --- shared projection machinery -------------------------------------------------

/// Batch points pushed through one kernel at the inducing inputs.
pub(crate) struct Projection<S> {
    /// Row `n` is `a_n = L^{-1} k(Z, x_n)`.
    pub a_rows: Mat<S>,
    /// Row `n` is `b_n = K(Z,Z)^{-1} k(Z, x_n)`.
    pub b_rows: Mat<S>,
    /// Prior variance `k(x_n, x_n)` per point.
    pub kdiag: Vec<S>,
}

pub(crate) fn project_points<S: Scalar>(
    kernel: &KernelOn<'_, S>,
    chol: &CholFactor<S>,
    x: &Mat<S>,
    z: &Mat<S>,
    anchor: S,
) -> Result<Projection<S>> {
    let kxz = kernel.cross(x, z)?;
    let a = tri_solve(chol, &kxz.transpose(), false)?;
    let b = tri_solve(chol, &a, true)?;
    Ok(Projection {
        a_rows: a.transpose(),
        b_rows: b.transpose(),
        kdiag: kernel.diag_x(x, anchor),
    })
}

/// Per-factor precomputation for marginal moments at projected points.
pub(crate) struct FactorHead<S> {
    /// `L^{-1} m`.
    c: Vec<S>,
    s_factor: Mat<S>,
}

pub(crate) fn factor_head<S: Scalar>(
    chol: &CholFactor<S>,
    q: &VariationalGaussian<S>,
) -> Result<FactorHead<S>> {
    Ok(FactorHead {
        c: tri_solve_vec(chol, q.mean(), false)?,
        s_factor: q.factor(),
    })
}

impl<S: Scalar> FactorHead<S> {
    /// Marginal mean and (clamped) variance of the sparse process at batch
    /// position `n`.
    pub(crate) fn mean_var_at(&self, proj: &Projection<S>, n: usize) -> (S, S) {
        let a = proj.a_rows.row(n);
        let b = proj.b_rows.row(n);
        let mean = dot(a, &self.c);
        let m = self.c.len();
        // q_r = (S^T b)_r, lower-triangular transpose product.
        let mut quad = {
            let mut q0 = self.s_factor.get(0, 0) * b[0];
            for k in 1..m {
                q0 = q0 + self.s_factor.get(k, 0) * b[k];
            }
            q0 * q0
        };
        for r in 1..m {
            let mut qr = self.s_factor.get(r, r) * b[r];
            for k in r + 1..m {
                qr = qr + self.s_factor.get(k, r) * b[k];
            }
            quad = quad + qr * qr;
        }
        let var = proj.kdiag[n] - norm_sq(a) + quad;
        (mean, clamp_variance(var))
    }
}

/// `v = m_v + S_v z_v`.
pub(crate) fn draw_v<S: Scalar>(q_v: &VariationalGaussian<S>, z_v: &[f64]) -> Vec<S> {
    let m = q_v.dim();
    debug_assert_eq!(z_v.len(), m);
    let s_factor = q_v.factor();
    let mean = q_v.mean();
    (0..m)
        .map(|i| {
            let mut acc = mean[i] + s_factor.get(i, 0) * z_v[0];
            for k in 1..=i {
                acc = acc + s_factor.get(i, k) * z_v[k];
            }
            acc
        })
        .collect()
}

/// Log-lengthscales at projected points given inducing values `v_draw`:
/// conditional mean plus conditional standard deviation times `z_ell`.
pub(crate) fn conditional_log_ell<S: Scalar>(
    chol_ell: &CholFactor<S>,
    proj_ell: &Projection<S>,
    v_draw: &[S],
    z_ell: &[f64],
) -> Result<(Vec<S>, Vec<S>)> {
    let u = tri_solve_vec(chol_ell, v_draw, false)?;
    let n = proj_ell.a_rows.rows();
    debug_assert_eq!(z_ell.len(), n);
    let mut log_ell = Vec::with_capacity(n);
    let mut ell = Vec::with_capacity(n);
    for i in 0..n {
        let a = proj_ell.a_rows.row(i);
        let mean = dot(a, &u);
        let var = clamp_variance(proj_ell.kdiag[i] - norm_sq(a));
        let le = mean + var.sqrt() * z_ell[i];
        log_ell.push(le);
        ell.push(le.exp());
    }
    Ok((log_ell, ell))
}

// --- per-datum expectation estimators ---------------------------------------------

/// Single-sample integrand `log N(y | sum_j l_j g_j, sigma2_err)`.
pub fn expected_loglik_direct<S: Scalar>(y: f64, l_row: &[S], g_draw: &[S], sigma2_err: S) -> S {
    let r = dot(l_row, g_draw) - y;
    (sigma2_err.ln() + LN_2PI) * (-0.5) - r * r / (sigma2_err * 2.0)
}

/// Latent outputs integrated out:
/// `log N(y | sum_j l_j mu_j, sigma2) - sum_j l_j^2 var_j / (2 sigma2)`.
pub fn expected_loglik_marginalized<S: Scalar>(
    y: f64,
    l_row: &[S],
    g_means: &[S],
    g_vars: &[S],
    sigma2_err: S,
) -> S {
    let r = dot(l_row, g_means) - y;
    let mut penalty = l_row[0] * l_row[0] * g_vars[0];
    for j in 1..l_row.len() {
        penalty = penalty + l_row[j] * l_row[j] * g_vars[j];
    }
    (sigma2_err.ln() + LN_2PI) * (-0.5) - r * r / (sigma2_err * 2.0) - penalty / (sigma2_err * 2.0)
}

// --- public sampling operations ---------------------------------------------------

/// One reparameterized draw of the lengthscale process over a batch.
#[derive(Clone, Debug)]
pub struct LengthscaleSample {
    pub v_draw: Vec<f64>,
    pub log_ell: Vec<f64>,
    pub ell_batch: Vec<f64>,
    pub z_v: Vec<f64>,
    pub z_ell: Vec<f64>,
}

/// Draw the inducing values `v` from `q(v)` and the lengthscale at each batch
/// point from its conditional. Draw order: `z_v` first, then one `z_ell` per
/// batch point.
pub fn sample_lengthscale(
    state: &VariationalState,
    hypers: &HyperParams,
    x_batch: &Mat,
    rng: &mut impl Rng,
) -> Result<LengthscaleSample> {
    let m = state.num_inducing();
    let z_v: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z_ell: Vec<f64> = (0..x_batch.rows())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let theta_ell = hypers.theta_ell();
    let kernel = KernelOn::Rbf(&theta_ell);
    let z = state.inducing().points();
    let chol = cholesky_jittered(&kernel.full_z(z)?, DEFAULT_JITTER)?;
    let proj = project_points(&kernel, &chol, x_batch, z, state.anchor())?;
    let v_draw = draw_v(state.q_v(), &z_v);
    let (log_ell, ell_batch) = conditional_log_ell(&chol, &proj, &v_draw, &z_ell)?;
    Ok(LengthscaleSample {
        v_draw,
        log_ell,
        ell_batch,
        z_v,
        z_ell,
    })
}

/// One reparameterized draw of the coefficient matrices over a batch.
#[derive(Clone, Debug)]
pub struct CoefficientSample {
    /// Per batch point, the lower-triangular `D x D` coefficient matrix.
    pub l_batch: Vec<Mat>,
    pub z_l: Vec<f64>,
}

/// Draw the coefficient matrix rows from the marginal variational
/// distribution of each pair: diagonal entries are exponentiated (log-normal
/// marginals), strictly-lower entries are Gaussian.
pub fn sample_coefficients(
    state: &VariationalState,
    hypers: &HyperParams,
    x_batch: &Mat,
    rng: &mut impl Rng,
) -> Result<CoefficientSample> {
    let d = state.num_outputs();
    let p = pair_count(d);
    let b = x_batch.rows();
    let z_l: Vec<f64> = (0..b * p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let theta_l = hypers.theta_l();
    let kernel = KernelOn::Rbf(&theta_l);
    let z = state.inducing().points();
    let chol = cholesky_jittered(&kernel.full_z(z)?, DEFAULT_JITTER)?;
    let proj = project_points(&kernel, &chol, x_batch, z, state.anchor())?;
    let heads: Vec<FactorHead<f64>> = state
        .q_u_all()
        .iter()
        .map(|q| factor_head(&chol, q))
        .collect::<Result<_>>()?;
    let l_batch = coefficient_draws(&heads, &proj, &z_l, d);
    Ok(CoefficientSample { l_batch, z_l })
}

pub(crate) fn coefficient_draws<S: Scalar>(
    heads: &[FactorHead<S>],
    proj: &Projection<S>,
    z_l: &[f64],
    d: usize,
) -> Vec<Mat<S>> {
    let p = pair_count(d);
    let b = proj.a_rows.rows();
    let zero = heads[0].c[0].lit(0.0);
    (0..b)
        .map(|n| {
            let mut l = Mat::from_fn(d, d, |_, _| zero);
            for (idx, (i, j)) in pairs(d).enumerate() {
                let (mean, var) = heads[idx].mean_var_at(proj, n);
                let t = mean + var.sqrt() * z_l[n * p + idx];
                l.set(i, j, if i == j { t.exp() } else { t });
            }
            l
        })
        .collect()
}

/// Marginal means and variances of the latent outputs at each batch point,
/// conditioned on the current lengthscale draw. Returns `(means, vars)`, each
/// `B x D`.
pub fn g_marginal_moments(
    state: &VariationalState,
    hypers: &HyperParams,
    x_batch: &Mat,
    ell_batch: &[f64],
    v_draw: &[f64],
) -> Result<(Mat, Mat)> {
    let _ = hypers; // the latent-output kernel has no free hyperparameters
    let ell_z: Vec<f64> = v_draw.iter().map(|v| v.exp()).collect();
    let z = state.inducing().points();
    let kernel = KernelOn::Gibbs {
        ell_x: ell_batch,
        ell_z: &ell_z,
    };
    let chol = cholesky_jittered(&kernel.full_z(z)?, DEFAULT_JITTER)?;
    let proj = project_points(&kernel, &chol, x_batch, z, state.anchor())?;
    let d = state.num_outputs();
    let b = x_batch.rows();
    let mut means = Mat::from_fn(b, d, |_, _| 0.0);
    let mut vars = Mat::from_fn(b, d, |_, _| 0.0);
    for j in 0..d {
        let head = factor_head(&chol, state.q_w(j))?;
        for n in 0..b {
            let (mean, var) = head.mean_var_at(&proj, n);
            means.set(n, j, mean);
            vars.set(n, j, var);
        }
    }
    Ok((means, vars))
}

/// One complete reparameterized draw of the latent processes for a batch,
/// carrying the noise that produced it.
#[derive(Clone, Debug)]
pub struct LatentBatchSample {
    pub noise: BatchNoise,
    pub v_draw: Vec<f64>,
    pub ell_batch: Vec<f64>,
    pub l_batch: Vec<Mat>,
    pub g_means: Mat,
    pub g_vars: Mat,
    /// Present only for the direct estimator.
    pub g_draw: Option<Mat>,
}

/// Draw everything the per-datum terms need, in the same order the bound
/// evaluation consumes noise.
pub fn sample_latent_batch(
    state: &VariationalState,
    hypers: &HyperParams,
    x_batch: &Mat,
    method: Estimator,
    rng: &mut impl Rng,
) -> Result<LatentBatchSample> {
    let noise = BatchNoise::draw(state.num_inducing(), x_batch.rows(), state.num_outputs(), rng);
    latent_from_noise(state, hypers, x_batch, method, &noise)
}

fn latent_from_noise(
    state: &VariationalState,
    hypers: &HyperParams,
    x_batch: &Mat,
    method: Estimator,
    noise: &BatchNoise,
) -> Result<LatentBatchSample> {
    let z = state.inducing().points();
    let anchor = state.anchor();
    let theta_ell = hypers.theta_ell();
    let kernel_ell = KernelOn::Rbf(&theta_ell);
    let chol_ell = cholesky_jittered(&kernel_ell.full_z(z)?, DEFAULT_JITTER)?;
    let proj_ell = project_points(&kernel_ell, &chol_ell, x_batch, z, anchor)?;
    let v_draw = draw_v(state.q_v(), &noise.z_v);
    let (_, ell_batch) = conditional_log_ell(&chol_ell, &proj_ell, &v_draw, &noise.z_ell)?;

    let theta_l = hypers.theta_l();
    let kernel_l = KernelOn::Rbf(&theta_l);
    let chol_l = cholesky_jittered(&kernel_l.full_z(z)?, DEFAULT_JITTER)?;
    let proj_l = project_points(&kernel_l, &chol_l, x_batch, z, anchor)?;
    let heads: Vec<FactorHead<f64>> = state
        .q_u_all()
        .iter()
        .map(|q| factor_head(&chol_l, q))
        .collect::<Result<_>>()?;
    let l_batch = coefficient_draws(&heads, &proj_l, &noise.z_l, state.num_outputs());

    let (g_means, g_vars) = g_marginal_moments(state, hypers, x_batch, &ell_batch, &v_draw)?;
    let g_draw = match method {
        Estimator::Direct => {
            let d = state.num_outputs();
            Some(Mat::from_fn(x_batch.rows(), d, |n, j| {
                g_means.get(n, j) + g_vars.get(n, j).sqrt() * noise.z_g[n * d + j]
            }))
        }
        Estimator::Marginalized => None,
    };
    Ok(LatentBatchSample {
        noise: noise.clone(),
        v_draw,
        ell_batch,
        l_batch,
        g_means,
        g_vars,
        g_draw,
    })
}

// --- the bound ---------------------------------------------------------------------

/// Stochastic evidence lower bound over a minibatch, drawing `n_samples`
/// latent samples from `rng`.
///
/// The data term is rescaled by the ratio of observed entries in the full
/// dataset to observed entries in the batch, so the estimator stays unbiased
/// under per-entry missingness. KL terms for the coefficient and lengthscale
/// factors are closed-form; the latent-output prior depends on the sampled
/// lengthscales, so its KL is averaged over the same latent draws.
pub fn elbo_minibatch(
    dataset: &Dataset,
    batch_indices: &[usize],
    state: &VariationalState,
    hypers: &HyperParams,
    method: Estimator,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<ElboBreakdown> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let noise: Vec<BatchNoise> = (0..n_samples)
        .map(|_| {
            BatchNoise::draw(
                state.num_inducing(),
                batch_indices.len(),
                state.num_outputs(),
                rng,
            )
        })
        .collect();
    elbo_with_noise(dataset, batch_indices, state, hypers, method, &noise)
}

/// Deterministic core of [`elbo_minibatch`]: evaluate the bound for given
/// noise. This is the function the gradient engine differentiates.
pub fn elbo_with_noise<S: Scalar>(
    dataset: &Dataset,
    batch_indices: &[usize],
    state: &VariationalState<S>,
    hypers: &HyperParams<S>,
    method: Estimator,
    noise: &[BatchNoise],
) -> Result<ElboBreakdown<S>> {
    if batch_indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if noise.is_empty() {
        return Err(Error::InvalidArgument("need at least one noise draw".into()));
    }
    let n_rows = dataset.num_rows();
    if let Some(&bad) = batch_indices.iter().find(|&&i| i >= n_rows) {
        return Err(Error::InvalidArgument(format!(
            "batch index {bad} out of range for {n_rows} rows"
        )));
    }
    let d = state.num_outputs();
    if dataset.num_outputs() != d {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} outputs but the state has {d}",
            dataset.num_outputs()
        )));
    }

    let anchor = state.anchor();
    let zero = anchor.lit(0.0);
    let z = state.inducing().points();
    let x_batch = dataset.inputs().select_rows(batch_indices).lift(anchor);
    let b = batch_indices.len();

    // Observed (position, output, value) triples in batch order.
    let obs: Vec<(usize, usize, f64)> = batch_indices
        .iter()
        .enumerate()
        .flat_map(|(pos, &row)| {
            (0..d).filter_map(move |out| {
                dataset
                    .observed(row, out)
                    .map(|y| (pos, out, y))
            })
        })
        .collect();
    let total_obs = dataset.observed_count();
    let scale = if obs.is_empty() {
        0.0
    } else {
        total_obs as f64 / obs.len() as f64
    };

    // Draw-independent pieces.
    let theta_l = hypers.theta_l();
    let kernel_l = KernelOn::Rbf(&theta_l);
    let chol_l = cholesky_jittered(&kernel_l.full_z(z)?, DEFAULT_JITTER)?;
    let theta_ell = hypers.theta_ell();
    let kernel_ell = KernelOn::Rbf(&theta_ell);
    let chol_ell = cholesky_jittered(&kernel_ell.full_z(z)?, DEFAULT_JITTER)?;

    let mut kl_u = gauss_kl(state.q_u_all()[0].mean(), &state.q_u_all()[0].chol(), &chol_l)?;
    for q in &state.q_u_all()[1..] {
        kl_u = kl_u + gauss_kl(q.mean(), &q.chol(), &chol_l)?;
    }
    let kl_v = gauss_kl(state.q_v().mean(), &state.q_v().chol(), &chol_ell)?;

    let proj_ell = project_points(&kernel_ell, &chol_ell, &x_batch, z, anchor)?;
    let proj_l = project_points(&kernel_l, &chol_l, &x_batch, z, anchor)?;
    let heads_l: Vec<FactorHead<S>> = state
        .q_u_all()
        .iter()
        .map(|q| factor_head(&chol_l, q))
        .collect::<Result<_>>()?;
    let sigma2 = hypers.sigma2_err();

    let mut loglik_acc = zero;
    let mut kl_w_acc = zero;
    for draw in noise {
        // Lengthscale process.
        let v_draw = draw_v(state.q_v(), &draw.z_v);
        let (_, ell_batch) = conditional_log_ell(&chol_ell, &proj_ell, &v_draw, &draw.z_ell)?;
        let ell_z: Vec<S> = v_draw.iter().map(|v| v.exp()).collect();

        // Latent-output kernel at the current lengthscales.
        let kernel_g = KernelOn::Gibbs {
            ell_x: &ell_batch,
            ell_z: &ell_z,
        };
        let chol_g = cholesky_jittered(&kernel_g.full_z(z)?, DEFAULT_JITTER)?;
        for q in state.q_w_all() {
            kl_w_acc = kl_w_acc + gauss_kl(q.mean(), &q.chol(), &chol_g)?;
        }
        let proj_g = project_points(&kernel_g, &chol_g, &x_batch, z, anchor)?;
        let heads_g: Vec<FactorHead<S>> = state
            .q_w_all()
            .iter()
            .map(|q| factor_head(&chol_g, q))
            .collect::<Result<_>>()?;

        // Coefficient draws and latent-output moments per batch point.
        let l_draws = coefficient_draws(&heads_l, &proj_l, &draw.z_l, d);
        let mut g_means = vec![zero; b * d];
        let mut g_vars = vec![zero; b * d];
        for (j, head) in heads_g.iter().enumerate() {
            for n in 0..b {
                let (mean, var) = head.mean_var_at(&proj_g, n);
                g_means[n * d + j] = mean;
                g_vars[n * d + j] = var;
            }
        }

        match method {
            Estimator::Direct => {
                let mut g_draws = vec![zero; b * d];
                for n in 0..b {
                    for j in 0..d {
                        let idx = n * d + j;
                        g_draws[idx] =
                            g_means[idx] + g_vars[idx].sqrt() * draw.z_g[idx];
                    }
                }
                for &(pos, out, y) in &obs {
                    let l_row: Vec<S> = (0..=out).map(|j| l_draws[pos].get(out, j)).collect();
                    let g_row = &g_draws[pos * d..pos * d + out + 1];
                    loglik_acc =
                        loglik_acc + expected_loglik_direct(y, &l_row, g_row, sigma2);
                }
            }
            Estimator::Marginalized => {
                for &(pos, out, y) in &obs {
                    let l_row: Vec<S> = (0..=out).map(|j| l_draws[pos].get(out, j)).collect();
                    let means = &g_means[pos * d..pos * d + out + 1];
                    let vars = &g_vars[pos * d..pos * d + out + 1];
                    loglik_acc = loglik_acc
                        + expected_loglik_marginalized(y, &l_row, means, vars, sigma2);
                }
            }
        }
    }

    let s_inv = 1.0 / noise.len() as f64;
    let expected_loglik = loglik_acc * s_inv * scale;
    let kl_w = kl_w_acc * s_inv;
    Ok(ElboBreakdown::assemble(expected_loglik, kl_u, kl_w, kl_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RbfKernel;
    use crate::model::InducingSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_state(seed: u64, m: usize, d: usize) -> (VariationalState, HyperParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = InducingSet::new(Mat::from_fn(m, 1, |i, _| i as f64 / (m.max(2) - 1) as f64))
            .unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            let mean: Vec<f64> = (0..m)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                .collect();
            let factor = Mat::from_fn(m, m, |i, j| {
                if j > i {
                    0.0
                } else if i == j {
                    rng.random_range(0.1..0.6)
                } else {
                    0.1 * rng.sample::<f64, _>(StandardNormal)
                }
            });
            VariationalGaussian::from_mean_and_factor(mean, &factor).unwrap()
        };
        let q_u = (0..pair_count(d)).map(|_| mk(&mut rng)).collect();
        let q_w = (0..d).map(|_| mk(&mut rng)).collect();
        let q_v = mk(&mut rng);
        let state = VariationalState::new(z, q_u, q_w, q_v).unwrap();
        let hypers = HyperParams::new(
            0.5,
            RbfKernel::new(1.0, 0.8).unwrap(),
            RbfKernel::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        (state, hypers)
    }

    fn tiny_dataset(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
        let y = Mat::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        Dataset::from_dense(x, y).unwrap()
    }

    #[test]
    fn lengthscale_collapses_at_inducing_point_with_tiny_factor() {
        let m = 3;
        let z = InducingSet::new(Mat::new(m, 1, vec![0.0, 0.5, 1.0]).unwrap()).unwrap();
        let mean = vec![0.7, -0.2, 0.4];
        let factor = Mat::from_fn(m, m, |i, j| if i == j { 1e-12 } else { 0.0 });
        let q_v = VariationalGaussian::from_mean_and_factor(mean.clone(), &factor).unwrap();
        let mk_unit = || {
            VariationalGaussian::from_mean_and_factor(
                vec![0.0; m],
                &Mat::from_fn(m, m, |i, j| if i == j { 0.1 } else { 0.0 }),
            )
            .unwrap()
        };
        let state =
            VariationalState::new(z, vec![mk_unit()], vec![mk_unit()], q_v).unwrap();
        let hypers = HyperParams::new(
            1.0,
            RbfKernel::new(1.0, 1.0).unwrap(),
            RbfKernel::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        let x = Mat::new(1, 1, vec![0.5]).unwrap();
        // z_ell = 0 is forced by replacing the draw afterwards; instead use the
        // deterministic pieces directly.
        let theta_ell = hypers.theta_ell();
        let kernel = KernelOn::Rbf(&theta_ell);
        let chol = cholesky_jittered(
            &kernel.full_z(state.inducing().points()).unwrap(),
            DEFAULT_JITTER,
        )
        .unwrap();
        let proj =
            project_points(&kernel, &chol, &x, state.inducing().points(), 0.0).unwrap();
        let v_draw = draw_v(state.q_v(), &[0.0; 3]);
        let (log_ell, ell) = conditional_log_ell(&chol, &proj, &v_draw, &[0.0]).unwrap();
        assert!((log_ell[0] - (-0.2)).abs() < 1e-6);
        assert!((ell[0] - (-0.2_f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn direct_loglik_analytic_values() {
        // zero residual, unit noise
        let v = expected_loglik_direct(2.0, &[1.0, 1.0], &[1.5, 0.5], 1.0);
        assert!((v - (-0.5 * LN_2PI)).abs() < 1e-12);
        // residual 1, unit noise
        let v = expected_loglik_direct(1.0, &[1.0], &[2.0], 1.0);
        assert!((v - (-0.5 * LN_2PI - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn direct_loglik_matches_independent_gaussian_pdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let g: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let y: f64 = rng.sample::<f64, _>(StandardNormal);
            let s2: f64 = rng.random_range(0.1..2.0);
            let mean = l[0] * g[0] + l[1] * g[1];
            let expect = -0.5 * (2.0 * std::f64::consts::PI * s2).ln()
                - (y - mean).powi(2) / (2.0 * s2);
            let got = expected_loglik_direct(y, &l, &g, s2);
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn marginalized_loglik_degenerate_and_analytic() {
        // zero variances reduce to the direct integrand at z_g = 0
        let d = expected_loglik_direct(0.3, &[0.7, -0.2], &[0.5, 1.0], 0.9);
        let m = expected_loglik_marginalized(0.3, &[0.7, -0.2], &[0.5, 1.0], &[0.0, 0.0], 0.9);
        assert!((d - m).abs() < 1e-12);
        // D = 1, y = 0, l = 1, mu = 0, var = 1, sigma2 = 1
        let v = expected_loglik_marginalized(0.0, &[1.0], &[0.0], &[1.0], 1.0);
        assert!((v - (-0.5 * LN_2PI - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn loglik_strictly_decreases_in_noise_at_zero_residual() {
        let a = expected_loglik_direct(1.0, &[1.0], &[1.0], 0.5);
        let b = expected_loglik_direct(1.0, &[1.0], &[1.0], 1.0);
        let c = expected_loglik_direct(1.0, &[1.0], &[1.0], 2.0);
        assert!(a > b && b > c);
    }

    #[test]
    fn breakdown_identity_holds_exactly() {
        let (state, hypers) = tiny_state(3, 4, 2);
        let ds = tiny_dataset(4, 6, 2);
        let batch: Vec<usize> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bd = elbo_minibatch(&ds, &batch, &state, &hypers, Estimator::Marginalized, 2, &mut rng)
            .unwrap();
        assert_eq!(bd.elbo, bd.expected_loglik - (bd.kl_u + bd.kl_w + bd.kl_v));
    }

    #[test]
    fn elbo_is_deterministic_for_fixed_seed() {
        let (state, hypers) = tiny_state(5, 4, 2);
        let ds = tiny_dataset(6, 5, 2);
        let batch: Vec<usize> = (0..5).collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            elbo_minibatch(&ds, &batch, &state, &hypers, Estimator::Direct, 3, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.elbo, b.elbo);
        assert_eq!(a.expected_loglik, b.expected_loglik);
    }

    #[test]
    fn fully_masked_batch_gives_minus_kl() {
        let (state, hypers) = tiny_state(7, 3, 2);
        let x = Mat::from_fn(4, 1, |i, _| i as f64 / 3.0);
        let y = Mat::from_fn(4, 2, |_, _| 0.0);
        let ds = Dataset::new(x, y, vec![false; 8], crate::data::DatasetMeta::default()).unwrap();
        let batch: Vec<usize> = (0..4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bd =
            elbo_minibatch(&ds, &batch, &state, &hypers, Estimator::Marginalized, 1, &mut rng)
                .unwrap();
        assert_eq!(bd.expected_loglik, 0.0);
        assert_eq!(bd.elbo, -(bd.kl_u + bd.kl_w + bd.kl_v));
    }

    #[test]
    fn full_batch_scale_is_one() {
        let (state, hypers) = tiny_state(8, 3, 2);
        let ds = tiny_dataset(9, 4, 2);
        let batch: Vec<usize> = (0..4).collect();
        let noise =
            vec![BatchNoise::draw(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(5))];
        let bd = elbo_with_noise(&ds, &batch, &state, &hypers, Estimator::Marginalized, &noise)
            .unwrap();
        // Recompute the unscaled sum directly: scale factor must be exactly 1.
        let bd2 = elbo_with_noise(&ds, &batch, &state, &hypers, Estimator::Marginalized, &noise)
            .unwrap();
        assert_eq!(bd.expected_loglik, bd2.expected_loglik);
        assert_eq!(ds.observed_count(), 8);
    }

    #[test]
    fn marginalized_ignores_g_noise() {
        let (state, hypers) = tiny_state(10, 3, 2);
        let ds = tiny_dataset(11, 5, 2);
        let batch: Vec<usize> = (0..5).collect();
        let mut noise = vec![BatchNoise::draw(3, 5, 2, &mut ChaCha8Rng::seed_from_u64(6))];
        let a = elbo_with_noise(&ds, &batch, &state, &hypers, Estimator::Marginalized, &noise)
            .unwrap();
        for z in noise[0].z_g.iter_mut() {
            *z += 10.0;
        }
        let b = elbo_with_noise(&ds, &batch, &state, &hypers, Estimator::Marginalized, &noise)
            .unwrap();
        assert_eq!(a.elbo, b.elbo);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (state, hypers) = tiny_state(12, 3, 2);
        let ds = tiny_dataset(13, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            elbo_minibatch(&ds, &[], &state, &hypers, Estimator::Direct, 1, &mut rng),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn subsampling_is_unbiased_for_fixed_noise() {
        // Average over all size-2 batches of 6 rows equals the full-batch
        // value when per-row noise is shared.
        let (state, hypers) = tiny_state(20, 3, 2);
        let ds = tiny_dataset(21, 6, 2);
        let master = BatchNoise::draw(3, 6, 2, &mut ChaCha8Rng::seed_from_u64(7));
        let p = pair_count(2);
        let slice_noise = |rows: &[usize]| BatchNoise {
            z_v: master.z_v.clone(),
            z_ell: rows.iter().map(|&r| master.z_ell[r]).collect(),
            z_l: rows
                .iter()
                .flat_map(|&r| master.z_l[r * p..(r + 1) * p].to_vec())
                .collect(),
            z_g: rows
                .iter()
                .flat_map(|&r| master.z_g[r * 2..(r + 1) * 2].to_vec())
                .collect(),
        };
        let full: Vec<usize> = (0..6).collect();
        let full_val = elbo_with_noise(
            &ds,
            &full,
            &state,
            &hypers,
            Estimator::Marginalized,
            &[slice_noise(&full)],
        )
        .unwrap();
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..6 {
            for j in i + 1..6 {
                let rows = vec![i, j];
                let bd = elbo_with_noise(
                    &ds,
                    &rows,
                    &state,
                    &hypers,
                    Estimator::Marginalized,
                    &[slice_noise(&rows)],
                )
                .unwrap();
                acc += bd.expected_loglik;
                count += 1.0;
            }
        }
        let avg = acc / count;
        assert!(
            (avg - full_val.expected_loglik).abs() < 1e-10 * (1.0 + full_val.expected_loglik.abs()),
            "avg {avg} vs full {}",
            full_val.expected_loglik
        );
    }

    #[test]
    fn coefficient_center_matches_marginal_median_field() {
        // With all z_l = 0 the draw is exp(mean) on the diagonal and the mean
        // off the diagonal.
        let (state, hypers) = tiny_state(30, 4, 2);
        let x = Mat::from_fn(3, 1, |i, _| 0.2 + i as f64 * 0.3);
        let theta_l = hypers.theta_l();
        let kernel = KernelOn::Rbf(&theta_l);
        let chol = cholesky_jittered(&kernel.full_z(state.inducing().points()).unwrap(), DEFAULT_JITTER)
            .unwrap();
        let proj = project_points(&kernel, &chol, &x, state.inducing().points(), 0.0).unwrap();
        let heads: Vec<FactorHead<f64>> = state
            .q_u_all()
            .iter()
            .map(|q| factor_head(&chol, q).unwrap())
            .collect();
        let draws = coefficient_draws(&heads, &proj, &vec![0.0; 3 * 3], 2);
        for n in 0..3 {
            for (idx, (i, j)) in pairs(2).enumerate() {
                let (mean, _) = heads[idx].mean_var_at(&proj, n);
                let got = draws[n].get(i, j);
                if i == j {
                    assert!((got - mean.exp()).abs() < 1e-13);
                    assert!(got > 0.0);
                } else {
                    assert!((got - mean).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn diagonal_coefficient_is_always_positive() {
        let (state, hypers) = tiny_state(31, 3, 1);
        let x = Mat::from_fn(4, 1, |i, _| i as f64 / 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = sample_coefficients(&state, &hypers, &x, &mut rng).unwrap();
            for l in &s.l_batch {
                assert!(l.get(0, 0) > 0.0);
            }
        }
    }
}
