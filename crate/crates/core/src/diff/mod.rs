//! Gradients of the seeded bound with respect to all unconstrained
//! parameters.
//!
//! Parameters are packed into one flat vector: variational means verbatim,
//! covariance-factor entries in their internal parameterization (strict lower
//! triangle raw, diagonal in log space), trainable hyperparameters in log
//! space, and the inducing inputs when those are marked trainable. Because
//! the state containers already store exactly that representation, pack and
//! unpack are plain copies and round-trip bitwise.
//!
//! The gradient engine replays [`crate::elbo::elbo_with_noise`] with tape
//! variables; the common-random-numbers contract (same seed, same noise) then
//! makes the gradient's value output bit-identical to the plain evaluation.

mod tape;

pub use tape::{Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::elbo::{elbo_with_noise, BatchNoise, Estimator};
use crate::error::{Error, Result};
use crate::model::{
    pair_count, pairs, HyperParams, InducingSet, TrainableFlags, VariationalGaussian,
    VariationalState,
};
use crate::numcore::Mat;
use crate::scalar::Scalar;

/// One named contiguous slice of the packed vector.
#[derive(Clone, Debug)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Order of the hyperparameter slots in packed vectors.
const HYPER_NAMES: [&str; 5] = [
    "hyper.sigma2_err",
    "hyper.variance_l",
    "hyper.lengthscale_l",
    "hyper.variance_ell",
    "hyper.lengthscale_ell",
];

fn hyper_trainable(flags: &TrainableFlags) -> [bool; 5] {
    [
        flags.sigma2_err,
        flags.variance_l,
        flags.lengthscale_l,
        flags.variance_ell,
        flags.lengthscale_ell,
    ]
}

/// Describes how a packed vector maps back onto a state and hyperparameters,
/// including the values of everything held fixed.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    d_outputs: usize,
    m_inducing: usize,
    input_dim: usize,
    flags: TrainableFlags,
    fixed_hyper_logs: [f64; 5],
    /// Inducing inputs, kept here when they are not trainable.
    fixed_z: Option<Mat<f64>>,
    total: usize,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Name of the segment containing coordinate `index`.
    pub fn segment_of(&self, index: usize) -> &str {
        self.segments
            .iter()
            .find(|s| index >= s.start && index < s.start + s.len)
            .map(|s| s.name.as_str())
            .unwrap_or("<out of range>")
    }
}

/// A flat parameter vector plus its layout descriptor.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

/// Flatten a state and hyperparameters into a [`ParamVector`].
pub fn pack(state: &VariationalState, hypers: &HyperParams) -> ParamVector {
    let d = state.num_outputs();
    let m = state.num_inducing();
    let mut values = Vec::new();
    let mut segments = Vec::new();
    let mut push = |name: String, vals: &[f64], values: &mut Vec<f64>| {
        segments.push(Segment {
            name,
            start: values.len(),
            len: vals.len(),
        });
        values.extend_from_slice(vals);
    };

    for (i, j) in pairs(d) {
        let q = state.q_u(i, j);
        push(format!("q_u[{i},{j}].mean"), q.mean(), &mut values);
        push(format!("q_u[{i},{j}].factor"), q.raw(), &mut values);
    }
    for (j, q) in state.q_w_all().iter().enumerate() {
        push(format!("q_w[{j}].mean"), q.mean(), &mut values);
        push(format!("q_w[{j}].factor"), q.raw(), &mut values);
    }
    push("q_v.mean".into(), state.q_v().mean(), &mut values);
    push("q_v.factor".into(), state.q_v().raw(), &mut values);

    let logs = hypers.logs();
    let trainable = hyper_trainable(&hypers.trainable);
    for (k, name) in HYPER_NAMES.iter().enumerate() {
        if trainable[k] {
            push((*name).into(), &[logs[k]], &mut values);
        }
    }

    let fixed_z = if hypers.trainable.inducing_inputs {
        push(
            "inducing_inputs".into(),
            state.inducing().points().data(),
            &mut values,
        );
        None
    } else {
        Some(state.inducing().points().clone())
    };

    let total = values.len();
    ParamVector {
        values,
        layout: ParamLayout {
            segments,
            d_outputs: d,
            m_inducing: m,
            input_dim: state.inducing().input_dim(),
            flags: hypers.trainable,
            fixed_hyper_logs: logs,
            fixed_z,
            total,
        },
    }
}

/// Rebuild a state and hyperparameters from packed values, in any scalar
/// context. `anchor` supplies the context for the fixed (non-packed) parts.
pub fn unpack_generic<S: Scalar>(
    values: &[S],
    layout: &ParamLayout,
    anchor: S,
) -> Result<(VariationalState<S>, HyperParams<S>)> {
    if values.len() != layout.total {
        return Err(Error::LayoutMismatch {
            expected: layout.total,
            got: values.len(),
        });
    }
    let d = layout.d_outputs;
    let m = layout.m_inducing;
    let tri = pair_count(m);
    let mut cursor = 0usize;
    let mut take = |len: usize| -> &[S] {
        let slice = &values[cursor..cursor + len];
        cursor += len;
        slice
    };

    let mut q_u = Vec::with_capacity(pair_count(d));
    for _ in pairs(d) {
        let mean = take(m).to_vec();
        let raw = take(tri).to_vec();
        q_u.push(VariationalGaussian::from_raw(mean, raw)?);
    }
    let mut q_w = Vec::with_capacity(d);
    for _ in 0..d {
        let mean = take(m).to_vec();
        let raw = take(tri).to_vec();
        q_w.push(VariationalGaussian::from_raw(mean, raw)?);
    }
    let q_v = {
        let mean = take(m).to_vec();
        let raw = take(tri).to_vec();
        VariationalGaussian::from_raw(mean, raw)?
    };

    let trainable = hyper_trainable(&layout.flags);
    let mut logs = [anchor; 5];
    for k in 0..5 {
        logs[k] = if trainable[k] {
            take(1)[0]
        } else {
            anchor.lit(layout.fixed_hyper_logs[k])
        };
    }
    let hypers = HyperParams::from_logs(logs, layout.flags);

    let z_mat: Mat<S> = if layout.flags.inducing_inputs {
        let data = take(m * layout.input_dim).to_vec();
        Mat::new(m, layout.input_dim, data)?
    } else {
        layout
            .fixed_z
            .as_ref()
            .expect("layout with fixed inducing inputs carries them")
            .lift(anchor)
    };
    debug_assert_eq!(cursor, layout.total);

    let state = VariationalState::new(InducingSet::new(z_mat)?, q_u, q_w, q_v)?;
    Ok((state, hypers))
}

/// `f64` specialization of [`unpack_generic`].
pub fn unpack(pv: &ParamVector) -> Result<(VariationalState, HyperParams)> {
    unpack_generic(&pv.values, &pv.layout, 0.0_f64)
}

/// Value and gradient of the seeded bound estimator at `p`.
///
/// The same seed produces the same noise draws as
/// [`crate::elbo::elbo_minibatch`] would consume, so the returned value is
/// bit-identical to the plain evaluation at `p`.
pub fn grad_elbo(
    dataset: &Dataset,
    batch_indices: &[usize],
    method: Estimator,
    n_samples: usize,
    seed: u64,
    p: &ParamVector,
) -> Result<(f64, Vec<f64>)> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<BatchNoise> = (0..n_samples)
        .map(|_| {
            BatchNoise::draw(
                p.layout.m_inducing,
                batch_indices.len(),
                p.layout.d_outputs,
                &mut rng,
            )
        })
        .collect();
    grad_elbo_with_noise(dataset, batch_indices, method, &noise, p)
}

/// Gradient of the bound for explicit noise draws. Input variables occupy the
/// first `p.values.len()` tape nodes, in packed order.
pub fn grad_elbo_with_noise(
    dataset: &Dataset,
    batch_indices: &[usize],
    method: Estimator,
    noise: &[BatchNoise],
    p: &ParamVector,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = p.values.iter().map(|&v| tape.var(v)).collect();
    let anchor = vars[0];
    let (state, hypers) = unpack_generic(&vars, &p.layout, anchor)?;
    let bd = elbo_with_noise(dataset, batch_indices, &state, &hypers, method, noise)?;
    let value = bd.elbo.val();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            quantity: "elbo".into(),
            segment: "<objective>".into(),
        });
    }
    let adjoints = tape.gradient(bd.elbo);
    let mut grad = Vec::with_capacity(p.values.len());
    for (i, var) in vars.iter().enumerate() {
        let g = adjoints[var.index() as usize];
        if !g.is_finite() {
            return Err(Error::NonFinite {
                quantity: "gradient".into(),
                segment: p.layout.segment_of(i).to_string(),
            });
        }
        grad.push(g);
    }
    Ok((value, grad))
}

/// Central finite differences of a seeded scalar function:
/// `(f(p + h e_i) - f(p - h e_i)) / (2 h)` with `h = step * max(1, |p_i|)`.
pub fn finite_diff(
    f: &mut dyn FnMut(&ParamVector) -> Result<f64>,
    p: &ParamVector,
    step: f64,
) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(p.values.len());
    let mut work = p.clone();
    for i in 0..p.values.len() {
        let h = step * p.values[i].abs().max(1.0);
        work.values[i] = p.values[i] + h;
        let up = f(&work)?;
        work.values[i] = p.values[i] - h;
        let down = f(&work)?;
        work.values[i] = p.values[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RbfKernel;
    use crate::numcore::{cholesky_jittered, gauss_kl, CholFactor, DEFAULT_JITTER};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny(seed: u64, m: usize, d: usize) -> (VariationalState, HyperParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = InducingSet::new(Mat::from_fn(m, 1, |i, _| {
            i as f64 / (m - 1).max(1) as f64
        }))
        .unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            let mean: Vec<f64> = (0..m)
                .map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let factor = Mat::from_fn(m, m, |i, j| {
                if j > i {
                    0.0
                } else if i == j {
                    rng.random_range(0.15..0.7)
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
            0.4,
            RbfKernel::new(1.0, 0.9).unwrap(),
            RbfKernel::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        (state, hypers)
    }

    #[test]
    fn pack_unpack_roundtrip_is_bitwise() {
        let (state, hypers) = tiny(1, 4, 2);
        let pv = pack(&state, &hypers);
        let (state2, hypers2) = unpack(&pv).unwrap();
        let pv2 = pack(&state2, &hypers2);
        assert_eq!(pv.values, pv2.values);
        for (a, b) in state.q_v().raw().iter().zip(state2.q_v().raw()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(hypers.logs(), hypers2.logs());
    }

    #[test]
    fn layout_segments_cover_vector() {
        let (state, hypers) = tiny(2, 3, 2);
        let pv = pack(&state, &hypers);
        let covered: usize = pv.layout.segments.iter().map(|s| s.len).sum();
        assert_eq!(covered, pv.values.len());
        let mut next = 0;
        for s in &pv.layout.segments {
            assert_eq!(s.start, next, "segments must be contiguous");
            next += s.len;
        }
        assert_eq!(pv.layout.segment_of(0), "q_u[0,0].mean");
    }

    #[test]
    fn log_diagonal_perturbation_scales_factor() {
        let (state, hypers) = tiny(3, 3, 1);
        let mut pv = pack(&state, &hypers);
        let seg = pv
            .layout
            .segments
            .iter()
            .find(|s| s.name == "q_v.factor")
            .unwrap()
            .clone();
        // First packed factor entry of q_v is the (0,0) log-diagonal.
        let before = unpack(&pv).unwrap().0.q_v().factor().get(0, 0);
        let delta = 0.3;
        pv.values[seg.start] += delta;
        let after = unpack(&pv).unwrap().0.q_v().factor().get(0, 0);
        assert!((after / before - delta.exp()).abs() < 1e-12);
    }

    #[test]
    fn layout_mismatch_is_detected() {
        let (state, hypers) = tiny(4, 3, 1);
        let pv = pack(&state, &hypers);
        let short = &pv.values[..pv.values.len() - 1];
        assert!(matches!(
            unpack_generic(short, &pv.layout, 0.0),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn trainable_z_roundtrips_through_vector() {
        let (state, mut hypers) = tiny(5, 3, 1);
        hypers.trainable.inducing_inputs = true;
        let pv = pack(&state, &hypers);
        assert!(pv
            .layout
            .segments
            .iter()
            .any(|s| s.name == "inducing_inputs"));
        let (state2, _) = unpack(&pv).unwrap();
        assert_eq!(
            state.inducing().points().data(),
            state2.inducing().points().data()
        );
    }

    #[test]
    fn engine_is_exact_on_quadratics() {
        // f(p) = sum_i (i+1) p_i^2 wired through the tape must have exact
        // gradient 2 (i+1) p_i.
        let tape = Tape::new();
        let p = [0.3, -1.2, 2.5];
        let vars: Vec<Var<'_>> = p.iter().map(|&v| tape.var(v)).collect();
        let mut f = vars[0] * vars[0];
        for (i, v) in vars.iter().enumerate().skip(1) {
            f = f + *v * *v * (i as f64 + 1.0);
        }
        let grads = tape.gradient(f);
        for (i, v) in vars.iter().enumerate() {
            let expect = 2.0 * (i as f64 + 1.0) * p[i];
            assert!((grads[v.index() as usize] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_diff_is_exact_on_linear_functions() {
        let (state, hypers) = tiny(6, 3, 1);
        let pv = pack(&state, &hypers);
        let coeffs: Vec<f64> = (0..pv.values.len()).map(|i| (i % 5) as f64 - 2.0).collect();
        let mut f = |p: &ParamVector| -> crate::error::Result<f64> {
            Ok(p.values.iter().zip(&coeffs).map(|(a, b)| a * b).sum())
        };
        let fd = finite_diff(&mut f, &pv, 1e-5).unwrap();
        for (g, c) in fd.iter().zip(&coeffs) {
            assert!((g - c).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_matches_analytic_kl_gradient_in_mean() {
        // KL(N(m, SS^T) || N(0, KK^T)) has gradient K^{-1} m in m.
        let m_dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Mat::from_fn(m_dim, m_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut kmat = b.matmul(&b.transpose()).unwrap();
        for i in 0..m_dim {
            kmat.set(i, i, kmat.get(i, i) + 1.0);
        }
        let k = cholesky_jittered(&kmat, DEFAULT_JITTER).unwrap();
        let s_factor = Mat::from_fn(m_dim, m_dim, |i, j| {
            if i == j {
                0.5
            } else {
                0.0
            }
        });
        let s = CholFactor::from_lower(s_factor).unwrap();
        let m0: Vec<f64> = (0..m_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        // Reuse the ParamVector plumbing for a mean-only function.
        let (state, hypers) = tiny(10, m_dim, 1);
        let mut pv = pack(&state, &hypers);
        pv.values.truncate(m_dim);
        pv.layout = ParamLayout {
            segments: vec![Segment {
                name: "m".into(),
                start: 0,
                len: m_dim,
            }],
            d_outputs: 1,
            m_inducing: m_dim,
            input_dim: 1,
            flags: hypers.trainable,
            fixed_hyper_logs: hypers.logs(),
            fixed_z: Some(Mat::from_fn(m_dim, 1, |i, _| i as f64)),
            total: m_dim,
        };
        pv.values.copy_from_slice(&m0);
        let mut f = |p: &ParamVector| -> crate::error::Result<f64> {
            gauss_kl(&p.values, &s, &k)
        };
        let fd = finite_diff(&mut f, &pv, 1e-5).unwrap();
        let analytic = {
            let half = crate::numcore::tri_solve_vec(&k, &m0, false).unwrap();
            crate::numcore::tri_solve_vec(&k, &half, true).unwrap()
        };
        for (g, a) in fd.iter().zip(&analytic) {
            assert!((g - a).abs() < 1e-7, "fd {g} vs analytic {a}");
        }
    }
}
