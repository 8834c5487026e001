//! Exact independent Gaussian process regression, one GP per output.
//!
//! The baseline cannot transfer information across outputs; each output sees
//! only its own observed entries. Hyperparameters maximize the exact log
//! marginal likelihood by gradient ascent in log space with seeded
//! multi-start.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kernels::RbfKernel;
use crate::numcore::{cholesky_jittered, tri_solve, tri_solve_vec, CholFactor, Mat, DEFAULT_JITTER};
use crate::predict::{PredSummary, SummaryRow};

const LN_2PI: f64 = 1.8378770664093453;
const Z_95: f64 = 1.959963984540054;

/// Cached training-side quantities for one fitted output.
#[derive(Clone, Debug)]
pub struct IgprCache {
    pub x: Mat,
    pub y: Vec<f64>,
    chol: CholFactor,
    alpha: Vec<f64>,
}

/// One output's fitted GP.
#[derive(Clone, Debug)]
pub struct IgprOutput {
    pub kernel: RbfKernel,
    pub noise_variance: f64,
    pub log_marginal_likelihood: f64,
    cache: IgprCache,
}

/// Independent exact GPs, one per output.
#[derive(Clone, Debug)]
pub struct IgprModel {
    pub outputs: Vec<IgprOutput>,
}

fn sq_dist_mat(x: &Mat, x2: &Mat) -> Mat {
    Mat::from_fn(x.rows(), x2.rows(), |i, j| {
        (0..x.cols())
            .map(|p| (x.get(i, p) - x2.get(j, p)).powi(2))
            .sum()
    })
}

struct LmlEval {
    value: f64,
    grad_logs: [f64; 3],
    chol: CholFactor,
    alpha: Vec<f64>,
}

/// Log marginal likelihood `log N(y | 0, K + sigma2 I)` and its gradient with
/// respect to `(log variance, log lengthscale, log sigma2)`.
fn lml_and_grad(d2: &Mat, y: &[f64], logs: [f64; 3]) -> Result<LmlEval> {
    let n = y.len();
    let variance = logs[0].exp();
    let lengthscale = logs[1].exp();
    let sigma2 = logs[2].exp();
    let corr = Mat::from_fn(n, n, |i, j| (-d2.get(i, j) / (2.0 * lengthscale * lengthscale)).exp());
    let k = Mat::from_fn(n, n, |i, j| {
        variance * corr.get(i, j) + if i == j { sigma2 } else { 0.0 }
    });
    let chol = cholesky_jittered(&k, DEFAULT_JITTER)?;
    let half = tri_solve_vec(&chol, y, false)?;
    let alpha = tri_solve_vec(&chol, &half, true)?;
    let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let value = -0.5 * fit - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI;

    // K^{-1} via two triangular solves against the identity.
    let eye = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let kinv = tri_solve(&chol, &tri_solve(&chol, &eye, false)?, true)?;

    // d lml / d theta = 1/2 (alpha^T dK alpha - tr(K^{-1} dK)) per parameter,
    // with dK in log space: variance * corr, variance * corr .* d2/ls^2,
    // sigma2 * I.
    let mut grad = [0.0; 3];
    let ls2 = lengthscale * lengthscale;
    for i in 0..n {
        for j in 0..n {
            let dk_var = variance * corr.get(i, j);
            let dk_ls = dk_var * d2.get(i, j) / ls2;
            let w = alpha[i] * alpha[j] - kinv.get(i, j);
            grad[0] += 0.5 * w * dk_var;
            grad[1] += 0.5 * w * dk_ls;
        }
        let w = alpha[i] * alpha[i] - kinv.get(i, i);
        grad[2] += 0.5 * w * sigma2;
    }
    Ok(LmlEval {
        value,
        grad_logs: grad,
        chol,
        alpha,
    })
}

fn observed_xy(ds: &Dataset, output: usize) -> (Mat, Vec<f64>) {
    let rows: Vec<usize> = (0..ds.num_rows())
        .filter(|&r| ds.is_observed(r, output))
        .collect();
    let x = ds.inputs().select_rows(&rows);
    let y = rows.iter().map(|&r| ds.y_observed(r, output)).collect();
    (x, y)
}

/// Fit one exact GP per output by seeded multi-start gradient ascent on the
/// log marginal likelihood. The best iterate of the best restart is kept, so
/// the returned optimum is never worse than any initialization.
pub fn igpr_fit(ds: &Dataset, restarts: usize, seed: u64) -> Result<IgprModel> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("need at least one restart".into()));
    }
    let range = ds.input_range()?;
    let span = range
        .iter()
        .map(|(lo, hi)| hi - lo)
        .fold(0.0_f64, f64::max)
        .max(1e-3);
    let mut outputs = Vec::with_capacity(ds.num_outputs());
    for d in 0..ds.num_outputs() {
        let (x, y) = observed_xy(ds, d);
        if y.len() < 2 {
            return Err(Error::DegenerateOutput(
                d,
                format!("need >= 2 observed entries, got {}", y.len()),
            ));
        }
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var_y = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).max(1e-8);
        let d2 = sq_dist_mat(&x, &x);

        let mut best: Option<([f64; 3], f64)> = None;
        for r in 0..restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (d * restarts + r) as u64));
            // Log-uniform initialization: lengthscale over [0.01, 10] x input
            // range, variance and noise around the output variance.
            let mut logs = [
                (var_y * 10f64.powf(rng.random_range(-1.0..1.0))).ln(),
                (span * 10f64.powf(rng.random_range(-2.0..1.0))).ln(),
                (var_y * 10f64.powf(rng.random_range(-3.0..0.0))).ln(),
            ];
            let mut m = [0.0; 3];
            let mut v = [0.0; 3];
            let mut best_here: Option<([f64; 3], f64)> = None;
            for t in 1..=160 {
                let eval = match lml_and_grad(&d2, &y, logs) {
                    Ok(e) => e,
                    Err(_) => break,
                };
                if best_here.is_none_or(|(_, b)| eval.value > b) {
                    best_here = Some((logs, eval.value));
                }
                let lr = 0.08;
                let b1 = 0.9;
                let b2 = 0.999;
                for i in 0..3 {
                    m[i] = b1 * m[i] + (1.0 - b1) * eval.grad_logs[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * eval.grad_logs[i] * eval.grad_logs[i];
                    let mh = m[i] / (1.0 - b1.powi(t));
                    let vh = v[i] / (1.0 - b2.powi(t));
                    logs[i] += lr * mh / (vh.sqrt() + 1e-8);
                }
            }
            if let Some((logs_here, value_here)) = best_here {
                if best.is_none_or(|(_, b)| value_here > b) {
                    best = Some((logs_here, value_here));
                }
            }
        }
        let (logs, value) = best.ok_or(Error::NotPositiveDefinite)?;
        let eval = lml_and_grad(&d2, &y, logs)?;
        outputs.push(IgprOutput {
            kernel: RbfKernel::new(logs[0].exp(), logs[1].exp())?,
            noise_variance: logs[2].exp(),
            log_marginal_likelihood: value,
            cache: IgprCache {
                x,
                y,
                chol: eval.chol,
                alpha: eval.alpha,
            },
        });
    }
    Ok(IgprModel { outputs })
}

/// Exact GP predictive moments per output: mean `k*^T (K + sigma2 I)^{-1} y`
/// and variance `k** - k*^T (K + sigma2 I)^{-1} k* + sigma2`.
pub fn igpr_predict(model: &IgprModel, ds_train: &Dataset, x_star: &Mat) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if ds_train.num_outputs() != model.outputs.len() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} outputs, dataset has {}",
            model.outputs.len(),
            ds_train.num_outputs()
        )));
    }
    let mut out = Vec::with_capacity(model.outputs.len());
    for output in &model.outputs {
        let cache = &output.cache;
        let d2 = sq_dist_mat(&cache.x, x_star);
        let ls2 = output.kernel.lengthscale * output.kernel.lengthscale;
        let k_star = Mat::from_fn(cache.x.rows(), x_star.rows(), |i, j| {
            output.kernel.variance * (-d2.get(i, j) / (2.0 * ls2)).exp()
        });
        let a = tri_solve(&cache.chol, &k_star, false)?;
        let mut means = Vec::with_capacity(x_star.rows());
        let mut vars = Vec::with_capacity(x_star.rows());
        for j in 0..x_star.rows() {
            let mean: f64 = (0..cache.x.rows())
                .map(|i| k_star.get(i, j) * cache.alpha[i])
                .sum();
            let reduction: f64 = (0..cache.x.rows()).map(|i| a.get(i, j).powi(2)).sum();
            let latent = (output.kernel.variance - reduction).max(0.0);
            means.push(mean);
            vars.push(latent + output.noise_variance);
        }
        out.push((means, vars));
    }
    Ok(out)
}

/// Gaussian 95% summary rows in the shared predictive format.
pub fn gaussian_summary(per_output: &[(Vec<f64>, Vec<f64>)]) -> Result<PredSummary> {
    let d = per_output.len();
    let n = per_output[0].0.len();
    let mut rows = Vec::with_capacity(n * d);
    for point in 0..n {
        for (output, (means, vars)) in per_output.iter().enumerate() {
            let sd = vars[point].sqrt();
            rows.push(SummaryRow {
                point,
                output,
                mean: means[point],
                lower: means[point] - Z_95 * sd,
                upper: means[point] + Z_95 * sd,
            });
        }
    }
    PredSummary::new(rows, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gp_draw_dataset(seed: u64, n: usize, variance: f64, lengthscale: f64, noise_sd: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
        let k = Mat::from_fn(n, n, |i, j| {
            let d = x.get(i, 0) - x.get(j, 0);
            variance * (-d * d / (2.0 * lengthscale * lengthscale)).exp()
                + if i == j { 1e-10 } else { 0.0 }
        });
        let chol = cholesky_jittered(&k, DEFAULT_JITTER).unwrap();
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let f = chol.lower().matvec(&z).unwrap();
        let y = Mat::from_fn(n, 1, |i, _| {
            f[i] + noise_sd * rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::from_dense(x, y).unwrap()
    }

    #[test]
    fn recovers_noise_on_gp_data() {
        let ds = gp_draw_dataset(1, 200, 1.0, 0.2, 0.1_f64.sqrt());
        let model = igpr_fit(&ds, 5, 3).unwrap();
        let fitted = model.outputs[0].noise_variance;
        assert!(
            (fitted - 0.1).abs() <= 0.5 * 0.1,
            "fitted noise {fitted} vs injected 0.1"
        );
    }

    #[test]
    fn interpolates_noise_free_sinusoid() {
        let n = 60;
        let x = Mat::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y = Mat::from_fn(n, 1, |i, _| (2.0 * std::f64::consts::PI * x.get(i, 0)).sin());
        let ds = Dataset::from_dense(x, y).unwrap();
        let model = igpr_fit(&ds, 5, 1).unwrap();
        let x_star = Mat::from_fn(40, 1, |i, _| 0.05 + 0.9 * i as f64 / 39.0);
        let preds = igpr_predict(&model, &ds, &x_star).unwrap();
        let mut se = 0.0;
        for j in 0..40 {
            let truth = (2.0 * std::f64::consts::PI * x_star.get(j, 0)).sin();
            se += (preds[0].0[j] - truth).powi(2);
        }
        let rmse = (se / 40.0).sqrt();
        assert!(rmse <= 0.05, "interpolation rmse {rmse}");
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let ds = gp_draw_dataset(5, 60, 1.0, 0.3, 0.2);
        let a = igpr_fit(&ds, 3, 11).unwrap();
        let b = igpr_fit(&ds, 3, 11).unwrap();
        assert_eq!(a.outputs[0].kernel.variance, b.outputs[0].kernel.variance);
        assert_eq!(a.outputs[0].noise_variance, b.outputs[0].noise_variance);
    }

    #[test]
    fn prediction_collapses_at_training_points_with_tiny_noise() {
        let n = 25;
        let x = Mat::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        let y = Mat::from_fn(n, 1, |i, _| (3.0 * x.get(i, 0)).cos());
        let ds = Dataset::from_dense(x.clone(), y.clone()).unwrap();
        let model = igpr_fit(&ds, 4, 2).unwrap();
        let preds = igpr_predict(&model, &ds, &x).unwrap();
        for i in 0..n {
            assert!((preds[0].0[i] - y.get(i, 0)).abs() < 0.05);
        }
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let ds = gp_draw_dataset(7, 50, 1.0, 0.15, 0.15);
        let model = igpr_fit(&ds, 4, 4).unwrap();
        let x_star = Mat::new(1, 1, vec![100.0]).unwrap();
        let preds = igpr_predict(&model, &ds, &x_star).unwrap();
        let out = &model.outputs[0];
        assert!(preds[0].0[0].abs() < 1e-6);
        assert!(
            (preds[0].1[0] - (out.kernel.variance + out.noise_variance)).abs()
                < 1e-6 * (1.0 + out.kernel.variance)
        );
    }

    #[test]
    fn predictive_variance_at_least_noise() {
        let ds = gp_draw_dataset(9, 50, 1.2, 0.25, 0.3);
        let model = igpr_fit(&ds, 4, 9).unwrap();
        let x_star = Mat::from_fn(30, 1, |i, _| -0.5 + 2.0 * i as f64 / 29.0);
        let preds = igpr_predict(&model, &ds, &x_star).unwrap();
        for v in &preds[0].1 {
            assert!(*v >= model.outputs[0].noise_variance - 1e-12);
        }
    }

    #[test]
    fn degenerate_output_is_rejected() {
        let x = Mat::from_fn(3, 1, |i, _| i as f64);
        let y = Mat::from_fn(3, 2, |i, j| (i + j) as f64);
        let mask = vec![true, false, true, false, false, false];
        let ds = Dataset::new(x, y, mask, crate::data::DatasetMeta::default()).unwrap();
        assert!(matches!(
            igpr_fit(&ds, 2, 1),
            Err(Error::DegenerateOutput(1, _))
        ));
    }
}
