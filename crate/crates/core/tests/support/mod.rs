//! Shared fixtures for the integration suites: random tiny model instances
//! and the trained synthetic models the heavyweight criteria reuse.

use std::sync::OnceLock;

use cnmgp::data::{generate_synthetic, Dataset, SyntheticKind};
use cnmgp::model::{pair_count, InducingSet, VariationalGaussian};
use cnmgp::trainer::{default_init, train, TrainConfig, TrainTrace};
use cnmgp::{derive_seed, HyperParams, Mat, RbfKernel, VariationalState};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A random dataset and a random (valid) variational state for oracle tests.
pub fn tiny_instance(
    seed: u64,
    n: usize,
    d: usize,
    m: usize,
) -> (Dataset, VariationalState, HyperParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Mat::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
    let y = Mat::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 1.5);
    let ds = Dataset::from_dense(x, y).unwrap();
    let (state, hypers) = random_state(&mut rng, m, d);
    (ds, state, hypers)
}

/// Random positive-diagonal factors and means, away from degenerate corners.
pub fn random_state(rng: &mut ChaCha8Rng, m: usize, d: usize) -> (VariationalState, HyperParams) {
    let z = InducingSet::new(Mat::from_fn(m, 1, |i, _| {
        0.05 + 0.9 * i as f64 / (m - 1).max(1) as f64
    }))
    .unwrap();
    let mut mk = |scale: f64, rng: &mut ChaCha8Rng| {
        let mean: Vec<f64> = (0..m)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let factor = Mat::from_fn(m, m, |i, j| {
            if j > i {
                0.0
            } else if i == j {
                rng.random_range(0.15..0.8)
            } else {
                0.15 * rng.sample::<f64, _>(StandardNormal)
            }
        });
        VariationalGaussian::from_mean_and_factor(mean, &factor).unwrap()
    };
    let q_u = (0..pair_count(d)).map(|_| mk(0.5, rng)).collect();
    let q_w = (0..d).map(|_| mk(0.5, rng)).collect();
    let q_v = mk(0.3, rng);
    let state = VariationalState::new(z, q_u, q_w, q_v).unwrap();
    let hypers = HyperParams::new(
        0.5,
        RbfKernel::new(1.0, 0.7).unwrap(),
        RbfKernel::new(1.0, 1.0).unwrap(),
    )
    .unwrap();
    (state, hypers)
}

/// Hyperparameters of the synthetic protocol: coefficient kernel lengthscale
/// e^2, lengthscale-process kernel lengthscale e^0, both held fixed; noise
/// and kernel variances trainable.
pub fn lf_protocol_hypers() -> HyperParams {
    HyperParams::new(
        1.0,
        RbfKernel::new(1.0, 2.0_f64.exp()).unwrap(),
        RbfKernel::new(1.0, 1.0).unwrap(),
    )
    .unwrap()
}

/// One trained synthetic run with everything the criteria inspect.
pub struct TrainedRun {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub state: VariationalState,
    pub hypers: HyperParams,
    pub trace: TrainTrace,
}

pub struct TrainedModels {
    pub lf: Vec<TrainedRun>,
    pub vf: Vec<TrainedRun>,
}

pub const LF_SEEDS: usize = 10;
pub const VF_SEEDS: usize = 3;
pub const N_PER_DIM: usize = 100;
pub const M_INDUCING: usize = 20;
pub const EPOCHS: usize = 2000;
pub const LEARNING_RATE: f64 = 0.005;

fn run_one(kind: SyntheticKind, seed: u64) -> TrainedRun {
    let (train_ds, test_ds) =
        generate_synthetic(kind, N_PER_DIM, 1.0, derive_seed(seed, 0xda7a)).unwrap();
    let hypers = lf_protocol_hypers();
    let init = default_init(&train_ds, M_INDUCING, &hypers).unwrap();
    let cfg = TrainConfig {
        epochs: EPOCHS,
        batch_size: None,
        learning_rate: LEARNING_RATE,
        seed,
        ..TrainConfig::default()
    };
    let (state, hypers, trace) = train(&train_ds, &init, &hypers, &cfg).unwrap();
    TrainedRun {
        seed,
        train: train_ds,
        test: test_ds,
        state,
        hypers,
        trace,
    }
}

fn threads() -> usize {
    std::env::var("CNMGP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1)
}

fn run_all(kind: SyntheticKind, n_seeds: usize) -> Vec<TrainedRun> {
    let jobs: Vec<u64> = (0..n_seeds as u64).collect();
    let workers = threads().min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<TrainedRun>> = (0..n_seeds).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if k >= jobs.len() {
                    break;
                }
                let run = run_one(kind, jobs[k]);
                slots.lock().unwrap()[k] = Some(run);
            });
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

static MODELS: OnceLock<TrainedModels> = OnceLock::new();

/// The trained synthetic models shared by criteria 5-8, built once.
pub fn trained_models() -> &'static TrainedModels {
    MODELS.get_or_init(|| {
        let started = std::time::Instant::now();
        let lf = run_all(SyntheticKind::Lf, LF_SEEDS);
        let vf = run_all(SyntheticKind::Vf, VF_SEEDS);
        eprintln!(
            "[fixture] trained {} LF + {} VF models in {:.1} s",
            lf.len(),
            vf.len(),
            started.elapsed().as_secs_f64()
        );
        TrainedModels { lf, vf }
    })
}
