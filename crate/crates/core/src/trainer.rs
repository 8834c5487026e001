//! Doubly stochastic training loop: epoch-wise shuffled minibatches, Adam
//! updates on the packed unconstrained parameters, trace recording and JSON
//! checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::derive_seed;
use crate::diff::{grad_elbo, pack, unpack, ParamVector};
use crate::elbo::Estimator;
use crate::error::{Error, Result};
use crate::kernels::{gibbs_matrix, rbf_matrix, GibbsEval};
use crate::model::{
    pair_count, HyperParams, InducingSet, ModelState, VariationalGaussian, VariationalState,
};
use crate::numcore::{cholesky_jittered, Mat, DEFAULT_JITTER};

/// Adam moment parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training loop configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Rows per minibatch; `None` means full batch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    /// Latent samples per step.
    pub n_samples: usize,
    pub method: Estimator,
    pub seed: u64,
    pub adam: AdamParams,
    /// Write a checkpoint every this many steps (0 disables periodic
    /// checkpoints). Checkpoints also go out on abort.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: None,
            learning_rate: 0.005,
            n_samples: 1,
            method: Estimator::Marginalized,
            seed: 0,
            adam: AdamParams::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
            }
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return Err(Error::InvalidArgument(
                "adam betas must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One record per optimization step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub elbo: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Wall-clock trace of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
}

impl TrainTrace {
    /// Trace as CSV with columns `step, epoch, elbo, grad_norm, seconds`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "epoch", "elbo", "grad_norm", "seconds"])?;
        for r in &self.steps {
            w.write_record(&[
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{}", r.elbo),
                format!("{}", r.grad_norm),
                format!("{}", r.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Moving average of the ELBO estimates with the given window.
    pub fn smoothed_elbo(&self, window: usize) -> Vec<f64> {
        let vals: Vec<f64> = self.steps.iter().map(|s| s.elbo).collect();
        let w = window.max(1);
        (0..vals.len())
            .map(|i| {
                let lo = i.saturating_sub(w - 1);
                let slice = &vals[lo..=i];
                slice.iter().sum::<f64>() / slice.len() as f64
            })
            .collect()
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Ascent step: parameters move along the gradient.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, p: &AdamParams) {
        self.t += 1;
        let bias1 = 1.0 - p.beta1.powi(self.t as i32);
        let bias2 = 1.0 - p.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * grad[i];
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] += lr * m_hat / (v_hat.sqrt() + p.epsilon);
        }
    }
}

fn write_checkpoint(dir: &Path, name: &str, pv: &ParamVector) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (state, hypers) = unpack(pv)?;
    ModelState { state, hypers }.save(&dir.join(name))
}

/// Maximize the bound with Adam over shuffled minibatches of data rows.
///
/// Only rows with at least one observed entry take part, so fully masked rows
/// behave exactly as if they were absent. Each epoch re-shuffles the row
/// order with a seeded generator; every step consumes a per-step derived seed
/// for its latent noise, which makes runs bit-reproducible.
pub fn train(
    dataset: &Dataset,
    init_state: &VariationalState,
    hypers: &HyperParams,
    cfg: &TrainConfig,
) -> Result<(VariationalState, HyperParams, TrainTrace)> {
    cfg.validate()?;
    let rows = dataset.observed_rows();
    if rows.is_empty() {
        return Err(Error::NoObservedEntries);
    }
    let n_eff = rows.len();
    let batch_size = cfg.batch_size.unwrap_or(n_eff).min(n_eff);

    let mut pv = pack(init_state, hypers);
    let mut adam = AdamState::new(pv.values.len());
    let mut trace = TrainTrace::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let mut order: Vec<usize> = (0..n_eff).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<usize> = chunk.iter().map(|&k| rows[k]).collect();
            let started = Instant::now();
            let step_seed = derive_seed(cfg.seed, step as u64);
            let result = grad_elbo(
                dataset,
                &batch,
                cfg.method,
                cfg.n_samples,
                step_seed,
                &pv,
            );
            let (value, grad) = match result {
                Ok(ok) => ok,
                Err(err) => {
                    if let Some(dir) = &cfg.checkpoint_dir {
                        write_checkpoint(dir, "abort.json", &pv)?;
                    }
                    return Err(err);
                }
            };
            adam.step(&mut pv.values, &grad, cfg.learning_rate, &cfg.adam);
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            step += 1;
            trace.steps.push(StepRecord {
                epoch,
                step,
                elbo: value,
                grad_norm,
                seconds: started.elapsed().as_secs_f64(),
            });
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(dir) = &cfg.checkpoint_dir {
                    write_checkpoint(dir, &format!("checkpoint_{step:06}.json"), &pv)?;
                }
            }
        }
    }
    let (state, hypers) = unpack(&pv)?;
    Ok((state, hypers, trace))
}

/// Default initialization: inducing inputs on an equispaced grid over the
/// observed input range, all variational means zero, covariance factors set
/// to `0.1 * chol(K(Z, Z))` of the matching prior (the latent-output prior is
/// taken at unit lengthscale, the mean of its log-normal prior's median).
pub fn default_init(
    dataset: &Dataset,
    m_inducing: usize,
    hypers: &HyperParams,
) -> Result<VariationalState> {
    if m_inducing == 0 {
        return Err(Error::InvalidArgument(
            "need at least one inducing input".into(),
        ));
    }
    let range = dataset.input_range()?;
    let p = range.len();
    let z = Mat::from_fn(m_inducing, p, |i, dim| {
        let (lo, hi) = range[dim];
        if m_inducing == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (m_inducing - 1) as f64
        }
    });
    let inducing = InducingSet::new(z)?;
    let d = dataset.num_outputs();

    let shrunk_factor = |k_zz: &Mat| -> Result<Mat> {
        let chol = cholesky_jittered(k_zz, DEFAULT_JITTER)?;
        Ok(Mat::from_fn(m_inducing, m_inducing, |i, j| {
            0.1 * chol.lower().get(i, j)
        }))
    };

    let theta_l = hypers.theta_l();
    let f_l = shrunk_factor(&rbf_matrix(inducing.points(), inducing.points(), &theta_l)?)?;
    let theta_ell = hypers.theta_ell();
    let f_ell = shrunk_factor(&rbf_matrix(
        inducing.points(),
        inducing.points(),
        &theta_ell,
    )?)?;
    let unit_ell = vec![1.0; m_inducing];
    let f_g = shrunk_factor(&gibbs_matrix(&GibbsEval {
        inputs_a: inducing.points(),
        lengthscales_a: &unit_ell,
        inputs_b: inducing.points(),
        lengthscales_b: &unit_ell,
    })?)?;

    let zeros = vec![0.0; m_inducing];
    let q_u = (0..pair_count(d))
        .map(|_| VariationalGaussian::from_mean_and_factor(zeros.clone(), &f_l))
        .collect::<Result<Vec<_>>>()?;
    let q_w = (0..d)
        .map(|_| VariationalGaussian::from_mean_and_factor(zeros.clone(), &f_g))
        .collect::<Result<Vec<_>>>()?;
    let q_v = VariationalGaussian::from_mean_and_factor(zeros, &f_ell)?;
    VariationalState::new(inducing, q_u, q_w, q_v)
}
