//! Posterior predictive sampling, time-varying correlation extraction, and
//! the evaluation metrics (RMSE, average credible-interval length, coverage
//! rate).
//!
//! Prediction conditions only on the variational factors at the inducing
//! inputs: per draw, sample the lengthscale process, then the latent outputs
//! from their marginal given that draw, then the coefficients, and mix.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::elbo::{
    coefficient_draws, conditional_log_ell, draw_v, factor_head, project_points, FactorHead,
};
use crate::error::{Error, Result};
use crate::model::{pairs, HyperParams, KernelOn, VariationalState};
use crate::numcore::{cholesky_jittered, Mat, DEFAULT_JITTER};

/// Mean and central 95% band for one `(point, output)` cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub point: usize,
    pub output: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Point-major summary table shared by the sampled predictive and the
/// Gaussian baseline.
#[derive(Clone, Debug, Default)]
pub struct PredSummary {
    rows: Vec<SummaryRow>,
    num_outputs: usize,
}

impl PredSummary {
    pub fn new(rows: Vec<SummaryRow>, num_outputs: usize) -> Result<Self> {
        for r in &rows {
            if r.lower > r.upper {
                return Err(Error::InvalidArgument(format!(
                    "summary interval at point {} output {} is inverted",
                    r.point, r.output
                )));
            }
        }
        Ok(Self { rows, num_outputs })
    }

    pub fn rows(&self) -> &[SummaryRow] {
        &self.rows
    }

    pub fn get(&self, point: usize, output: usize) -> &SummaryRow {
        &self.rows[point * self.num_outputs + output]
    }
}

/// Monte-Carlo draws of the outputs at test inputs with per-cell summaries.
#[derive(Clone, Debug)]
pub struct PredictiveSamples {
    pub x_star: Mat,
    /// One `n x D` matrix per draw.
    pub draws: Vec<Mat>,
    pub summary: PredSummary,
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Sample the posterior predictive at `x_star`.
///
/// Per draw: sample the inducing log-lengthscale values and the lengthscale
/// at each test point, sample each latent output from its marginal given that
/// lengthscale draw, sample the coefficient matrix rows (diagonal entries
/// exponentiated), mix, and optionally add observation noise. Summaries are
/// the empirical mean and 2.5/97.5 percentiles over draws.
pub fn predictive_samples(
    state: &VariationalState,
    hypers: &HyperParams,
    x_star: &Mat,
    n_draws: usize,
    rng: &mut impl Rng,
    include_noise: bool,
) -> Result<PredictiveSamples> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let draws = sample_paths(state, hypers, x_star, n_draws, rng, include_noise, false)?
        .into_iter()
        .map(|p| p.y)
        .collect::<Vec<_>>();
    let n = x_star.rows();
    let d = state.num_outputs();
    let mut rows = Vec::with_capacity(n * d);
    let mut buf = vec![0.0; n_draws];
    for point in 0..n {
        for output in 0..d {
            for (s, draw) in draws.iter().enumerate() {
                buf[s] = draw.get(point, output);
            }
            let mean = buf.iter().sum::<f64>() / n_draws as f64;
            buf.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
            rows.push(SummaryRow {
                point,
                output,
                mean,
                lower: quantile(&buf, 0.025),
                upper: quantile(&buf, 0.975),
            });
        }
    }
    Ok(PredictiveSamples {
        x_star: x_star.clone(),
        draws,
        summary: PredSummary::new(rows, d)?,
    })
}

struct PathDraw {
    y: Mat,
    l: Vec<Mat>,
    log_ell: Vec<f64>,
}

/// Shared sampling core for prediction and correlation extraction.
fn sample_paths(
    state: &VariationalState,
    hypers: &HyperParams,
    x_star: &Mat,
    n_draws: usize,
    rng: &mut impl Rng,
    include_noise: bool,
    coefficients_only: bool,
) -> Result<Vec<PathDraw>> {
    let z = state.inducing().points();
    let anchor = state.anchor();
    let n = x_star.rows();
    let d = state.num_outputs();
    let n_pairs = crate::model::pair_count(d);

    let theta_ell = hypers.theta_ell();
    let kernel_ell = KernelOn::Rbf(&theta_ell);
    let chol_ell = cholesky_jittered(&kernel_ell.full_z(z)?, DEFAULT_JITTER)?;
    let proj_ell = project_points(&kernel_ell, &chol_ell, x_star, z, anchor)?;

    let theta_l = hypers.theta_l();
    let kernel_l = KernelOn::Rbf(&theta_l);
    let chol_l = cholesky_jittered(&kernel_l.full_z(z)?, DEFAULT_JITTER)?;
    let proj_l = project_points(&kernel_l, &chol_l, x_star, z, anchor)?;
    let heads_l: Vec<FactorHead<f64>> = state
        .q_u_all()
        .iter()
        .map(|q| factor_head(&chol_l, q))
        .collect::<Result<_>>()?;

    let sigma = hypers.sigma2_err().sqrt();
    let mut out = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let z_v: Vec<f64> = (0..state.num_inducing())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z_ell: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z_l: Vec<f64> = (0..n * n_pairs)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();

        let v_draw = draw_v(state.q_v(), &z_v);
        let (log_ell, ell_star) = conditional_log_ell(&chol_ell, &proj_ell, &v_draw, &z_ell)?;
        let l_draws = coefficient_draws(&heads_l, &proj_l, &z_l, d);

        let y = if coefficients_only {
            Mat::from_fn(0, 0, |_, _| 0.0)
        } else {
            let z_g: Vec<f64> = (0..n * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ell_z: Vec<f64> = v_draw.iter().map(|v| v.exp()).collect();
            let kernel_g = KernelOn::Gibbs {
                ell_x: &ell_star,
                ell_z: &ell_z,
            };
            let chol_g = cholesky_jittered(&kernel_g.full_z(z)?, DEFAULT_JITTER)?;
            let proj_g = project_points(&kernel_g, &chol_g, x_star, z, anchor)?;
            let mut g = Mat::from_fn(n, d, |_, _| 0.0);
            for (j, q) in state.q_w_all().iter().enumerate() {
                let head = factor_head(&chol_g, q)?;
                for point in 0..n {
                    let (mean, var) = head.mean_var_at(&proj_g, point);
                    g.set(point, j, mean + var.sqrt() * z_g[point * d + j]);
                }
            }
            Mat::from_fn(n, d, |point, out_d| {
                let mut acc = 0.0;
                for j in 0..=out_d {
                    acc += l_draws[point].get(out_d, j) * g.get(point, j);
                }
                if include_noise {
                    acc += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                acc
            })
        };
        out.push(PathDraw {
            y,
            l: l_draws,
            log_ell,
        });
    }
    Ok(out)
}

/// Per-grid-point posterior-mean correlation matrices and log-lengthscale
/// estimates.
#[derive(Clone, Debug)]
pub struct CorrelationTrack {
    pub grid: Mat,
    /// One `D x D` correlation matrix per grid point.
    pub corr: Vec<Mat>,
    pub log_lengthscale: Vec<f64>,
}

/// Instantaneous output correlations along a grid: per draw the noise-free
/// covariance at a point is `L(x) L(x)^T` (the latent-output correlation is
/// exactly one at coincident points), converted to a correlation matrix and
/// averaged over draws; the lengthscale track is the mean of the sampled log
/// lengthscales.
pub fn correlation_track(
    state: &VariationalState,
    hypers: &HyperParams,
    grid: &Mat,
    n_draws: usize,
    rng: &mut impl Rng,
) -> Result<CorrelationTrack> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let d = state.num_outputs();
    let n = grid.rows();
    let paths = sample_paths(state, hypers, grid, n_draws, rng, false, true)?;
    let mut corr_acc = vec![Mat::from_fn(d, d, |_, _| 0.0); n];
    let mut log_ell_acc = vec![0.0; n];
    for path in &paths {
        for point in 0..n {
            let l = &path.l[point];
            // Sigma = L L^T restricted to the lower triangle.
            let mut sigma = Mat::from_fn(d, d, |_, _| 0.0);
            for i in 0..d {
                for j in 0..=i {
                    let mut acc = 0.0;
                    for k in 0..=j.min(i) {
                        acc += l.get(i, k) * l.get(j, k);
                    }
                    sigma.set(i, j, acc);
                    sigma.set(j, i, acc);
                }
            }
            for i in 0..d {
                if sigma.get(i, i) < 1e-12 {
                    return Err(Error::DegenerateCovariance(point));
                }
            }
            let acc = &mut corr_acc[point];
            for i in 0..d {
                for j in 0..d {
                    let c = sigma.get(i, j) / (sigma.get(i, i) * sigma.get(j, j)).sqrt();
                    acc.set(i, j, acc.get(i, j) + c);
                }
            }
            log_ell_acc[point] += path.log_ell[point];
        }
    }
    let s = n_draws as f64;
    let corr = corr_acc
        .into_iter()
        .map(|m| {
            Mat::from_fn(d, d, |i, j| {
                if i == j {
                    1.0
                } else {
                    (m.get(i, j) / s).clamp(-1.0, 1.0)
                }
            })
        })
        .collect();
    let log_lengthscale = log_ell_acc.into_iter().map(|v| v / s).collect();
    Ok(CorrelationTrack {
        grid: grid.clone(),
        corr,
        log_lengthscale,
    })
}

/// Test metrics over a predictive summary.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub alci: f64,
    pub cr: f64,
}

/// Root mean squared error of the predictive means, average 95% interval
/// length, and coverage rate (interval endpoints count as inside) over the
/// given `(point, output, value)` test entries.
pub fn metrics(y_true: &[(usize, usize, f64)], summary: &PredSummary) -> Result<Metrics> {
    if y_true.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut se = 0.0;
    let mut width = 0.0;
    let mut covered = 0usize;
    for &(point, output, y) in y_true {
        let row = summary.get(point, output);
        se += (row.mean - y).powi(2);
        width += row.upper - row.lower;
        if y >= row.lower && y <= row.upper {
            covered += 1;
        }
    }
    let n = y_true.len() as f64;
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        alci: width / n,
        cr: covered as f64 / n,
    })
}

/// Predictions CSV: one row per `(point, output)` with the input components
/// first, then `output, mean, lower95, upper95`.
pub fn save_predictions_csv(x_star: &Mat, summary: &PredSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..x_star.cols()).map(|p| format!("x{p}")).collect();
    header.extend(["output", "mean", "lower95", "upper95"].map(String::from));
    w.write_record(&header)?;
    for row in summary.rows() {
        let mut rec: Vec<String> = (0..x_star.cols())
            .map(|p| format!("{}", x_star.get(row.point, p)))
            .collect();
        rec.push(row.output.to_string());
        rec.push(format!("{}", row.mean));
        rec.push(format!("{}", row.lower));
        rec.push(format!("{}", row.upper));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Correlation CSV: one row per `(point, i, j)` with `i >= j`, carrying the
/// averaged correlation and the log-lengthscale estimate at that point.
pub fn save_correlations_csv(track: &CorrelationTrack, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..track.grid.cols()).map(|p| format!("x{p}")).collect();
    header.extend(["i", "j", "corr", "log_lengthscale"].map(String::from));
    w.write_record(&header)?;
    let d = track.corr[0].rows();
    for (point, corr) in track.corr.iter().enumerate() {
        for (i, j) in pairs(d) {
            let mut rec: Vec<String> = (0..track.grid.cols())
                .map(|p| format!("{}", track.grid.get(point, p)))
                .collect();
            rec.push(i.to_string());
            rec.push(j.to_string());
            rec.push(format!("{}", corr.get(i, j)));
            rec.push(format!("{}", track.log_lengthscale[point]));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
