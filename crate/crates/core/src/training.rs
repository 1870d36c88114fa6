//! Adam optimisation of the ELBO and a finite-difference gradient verifier.

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataCache, Dataset, ResidualDeepGP};

/// Denominator floor for relative gradient errors; smaller gradients are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam descent step `params -= lr · m̂ / (√v̂ + ε)` on the loss gradient `grad`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            expected: state.m.len(),
            got: grad.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    /// Minibatch size; `None` trains on the full dataset.
    pub batch_size: Option<usize>,
    pub samples: usize,
    pub seed: u64,
    /// For single-block interdomain scalar models, set `q` to its closed-form
    /// optimum before every step so Adam only moves the hyperparameters.
    /// Other models ignore it.
    pub optimal_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            lr: 0.01,
            batch_size: None,
            samples: 3,
            seed: 0,
            optimal_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// ELBO estimate at each step, before the update.
    pub elbo_trace: Vec<f64>,
}

/// Gradient of the ELBO with respect to the unconstrained parameters.
pub fn elbo_gradient(
    model: &ResidualDeepGP,
    cache: &DataCache,
    batch: Option<&[usize]>,
    n_total: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(model.elbo_and_gradient(cache, batch, n_total, samples, seed)?.1)
}

/// Maximises the ELBO with Adam. Deterministic given `config.seed`.
pub fn train(model: &mut ResidualDeepGP, data: &Dataset, config: &TrainConfig) -> Result<TrainResult> {
    let cache = model.cache(data)?;
    train_cached(model, &cache, config)
}

pub fn train_cached(model: &mut ResidualDeepGP, cache: &DataCache, config: &TrainConfig) -> Result<TrainResult> {
    let n = cache.len();
    let mut adam = AdamState::new(model.parameters().len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.iters);
    let mut params = model.parameters().unconstrained.clone();
    for it in 0..config.iters {
        if config.optimal_head && model.set_optimal_head(cache)? {
            params.clone_from(&model.parameters().unconstrained);
        }
        let step_seed: u64 = rng.random();
        let batch = match config.batch_size {
            Some(b) if b < n => Some(sample(&mut rng, n, b.max(1)).into_vec()),
            _ => None,
        };
        let (value, grad) = model
            .elbo_and_gradient(cache, batch.as_deref(), n, config.samples, step_seed)
            .map_err(|e| match e {
                Error::NonFinite { what, detail } => Error::NonFinite {
                    what,
                    detail: format!("{detail} at iteration {it}; trace so far {:?}", last(&trace)),
                },
                other => other,
            })?;
        trace.push(value);
        let loss_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam_step(&mut adam, &mut params, &loss_grad)?;
        model.set_unconstrained(params.clone())?;
    }
    if config.optimal_head {
        model.set_optimal_head(cache)?;
    }
    Ok(TrainResult { elbo_trace: trace })
}

fn last(trace: &[f64]) -> &[f64] {
    &trace[trace.len().saturating_sub(10)..]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub worst_index: usize,
    pub worst_name: String,
    pub worst_error: f64,
}

/// Central differences of the ELBO at fixed noise against the analytic gradient.
pub fn finite_difference_check(
    model: &ResidualDeepGP,
    cache: &DataCache,
    batch: Option<&[usize]>,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientCheck> {
    let analytic = elbo_gradient(model, cache, batch, cache.len(), samples, seed)?;
    compare_with_finite_differences(model, cache, batch, step, samples, seed, analytic)
}

/// As [`finite_difference_check`] but against a caller-supplied gradient.
pub fn compare_with_finite_differences(
    model: &ResidualDeepGP,
    cache: &DataCache,
    batch: Option<&[usize]>,
    step: f64,
    samples: usize,
    seed: u64,
    analytic: Vec<f64>,
) -> Result<GradientCheck> {
    if !(step > 0.0) {
        return Err(Error::Domain {
            function: "finite-difference step",
            value: step,
        });
    }
    let u = model.parameters().unconstrained.clone();
    if analytic.len() != u.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: analytic.len(),
        });
    }
    let mask = model.parameters().trainable_mask();
    let mut probe = model.clone();
    let mut numeric = vec![0.0; u.len()];
    for i in 0..u.len() {
        if !mask[i] {
            continue;
        }
        let mut p = u.clone();
        p[i] = u[i] + step;
        probe.set_unconstrained(p.clone())?;
        let fp = probe.elbo_cached(cache, batch, cache.len(), samples, seed)?;
        p[i] = u[i] - step;
        probe.set_unconstrained(p)?;
        let fm = probe.elbo_cached(cache, batch, cache.len(), samples, seed)?;
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    let relative_errors: Vec<f64> = numeric
        .iter()
        .zip(&analytic)
        .map(|(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(GRADIENT_FLOOR))
        .collect();
    let (worst_index, worst_error) = relative_errors
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradientCheck {
        worst_name: model.parameters().name_of(worst_index).to_string(),
        analytic,
        numeric,
        relative_errors,
        worst_index,
        worst_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Smoothness;
    use crate::model::{FamilyKind, ModelConfig, Targets};
    use crate::params::Transform;
    use crate::sphere::random_point;
    use crate::variational::{ExactGp, LayerPrior};
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<_> = (0..n).map(|_| random_point(2, &mut rng)).collect();
        let ys = xs
            .iter()
            .map(|x| (2.0 * x.coords()[0]).sin() + x.coords()[2] * x.coords()[1] + 0.05 * rng.random::<f64>())
            .collect();
        Dataset::new(xs, Targets::Scalar(ys)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut s = AdamState::new(3, 0.01);
        let mut p = vec![0.0; 3];
        adam_step(&mut s, &mut p, &[3.0, -0.02, 1e3]).unwrap();
        for (x, g) in p.iter().zip([3.0f64, -0.02, 1e3]) {
            assert!((x + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let a = [1.0, 10.0, 0.1];
        let c = [0.3, -1.2, 2.0];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3, 0.01);
        for _ in 0..5000 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (p[i] - c[i])).collect();
            adam_step(&mut s, &mut p, &g).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - c[i]).abs() < 1e-6, "{} vs {}", p[i], c[i]);
        }
    }

    #[test]
    fn zero_iterations_leave_model() {
        let data = toy(8, 1);
        let mut model = ResidualDeepGP::new(&ModelConfig::default(), &data.inputs).unwrap();
        let before = model.parameters().clone();
        let r = train(&mut model, &data, &TrainConfig { iters: 0, ..TrainConfig::default() }).unwrap();
        assert!(r.elbo_trace.is_empty());
        assert_eq!(model.parameters(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(10, 2);
        let cfg = TrainConfig {
            iters: 15,
            batch_size: Some(6),
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ResidualDeepGP::new(&ModelConfig::default(), &data.inputs).unwrap();
            let r = train(&mut m, &data, &cfg).unwrap();
            (m.parameters().unconstrained.clone(), r.elbo_trace)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn same_seed_gives_identical_gradients() {
        let data = toy(10, 3);
        let m = ResidualDeepGP::new(&ModelConfig::default(), &data.inputs).unwrap();
        let c = m.cache(&data).unwrap();
        let a = elbo_gradient(&m, &c, None, 10, 3, 11).unwrap();
        let b = elbo_gradient(&m, &c, None, 10, 3, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_gradient_vanishes_at_zero_mean() {
        // with no data, only the KL term contributes
        let data = toy(4, 4);
        let m = ResidualDeepGP::new(&ModelConfig::default(), &data.inputs).unwrap();
        let c = m.cache(&data).unwrap();
        let g = elbo_gradient(&m, &c, Some(&[]), 4, 1, 0).unwrap();
        for e in &m.parameters().entries {
            if e.name.ends_with(".mean") {
                assert!(g[e.offset..e.offset + e.len].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn hidden_variance_initialisation() {
        let data = toy(4, 5);
        let m = ResidualDeepGP::new(&ModelConfig { depth: 3, ..ModelConfig::default() }, &data.inputs).unwrap();
        for h in m.hidden_layers() {
            for spec in h.prior.components() {
                assert!((spec.sigma2 - 5e-5).abs() < 1e-15);
                assert_eq!(spec.kappa, 1.0);
                assert_eq!(spec.nu, Smoothness::Finite(1.5));
            }
        }
        let LayerPrior::Scalar(head) = m.head().prior else { panic!() };
        assert_eq!(head.sigma2, 1.0);
    }

    #[test]
    fn finite_difference_verifier() {
        let data = toy(8, 6);
        let cfg = ModelConfig {
            depth: 1,
            family: FamilyKind::Il,
            num_inducing: 5,
            head_truncation: Some(4),
            ..ModelConfig::default()
        };
        let mut m = ResidualDeepGP::new(&cfg, &data.inputs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = m.parameters().unconstrained.iter().map(|v| v + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        m.set_unconstrained(u).unwrap();
        let c = m.cache(&data).unwrap();
        let report = finite_difference_check(&m, &c, None, 1e-5, 1, 0).unwrap();
        assert!(report.worst_error < 1e-4, "{} {}", report.worst_name, report.worst_error);
        let mut bad = report.analytic.clone();
        bad[3] *= 1.5;
        bad[3] += 0.1;
        let flagged = compare_with_finite_differences(&m, &c, None, 1e-5, 1, 0, bad).unwrap();
        assert_eq!(flagged.worst_index, 3);
        assert!(flagged.worst_error > 1e-2);
        let coarse = finite_difference_check(&m, &c, None, 1e-2, 1, 0).unwrap();
        assert!(coarse.worst_error > report.worst_error);
    }

    #[test]
    fn optimal_head_attains_exact_evidence() {
        let data = toy(25, 4);
        let cfg = ModelConfig {
            depth: 1,
            ..ModelConfig::default()
        };
        let mut m = ResidualDeepGP::new(&cfg, &data.inputs).unwrap();
        let cache = m.cache(&data).unwrap();
        assert!(m.set_optimal_head(&cache).unwrap());
        let LayerPrior::Scalar(spec) = m.head().prior else { panic!() };
        let Targets::Scalar(ys) = &data.targets else { panic!() };
        let gp = ExactGp::new(spec, data.inputs.clone(), DVector::from_vec(ys.clone()), m.noise_variance()).unwrap();
        let evidence = gp.log_marginal_likelihood().unwrap();
        let elbo = m.elbo(&data, 1, 0).unwrap();
        assert!((elbo - evidence).abs() < 1e-8 * evidence.abs().max(1.0), "elbo {elbo} evidence {evidence}");
        // stationary in the variational parameters
        let (_, g) = m.elbo_and_gradient(&cache, None, cache.len(), 1, 0).unwrap();
        for name in ["head.block0.mean", "head.block0.factor"] {
            let e = m.parameters().entry(name).unwrap();
            let worst = g[e.offset..e.offset + e.len].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(worst < 1e-8, "{name}: {worst}");
        }
        // hyperparameter-only training increases the collapsed bound
        let r = train(&mut m, &data, &TrainConfig { iters: 200, optimal_head: true, ..TrainConfig::default() }).unwrap();
        assert!(m.elbo(&data, 1, 0).unwrap() > r.elbo_trace[0]);
    }

    #[test]
    fn optimal_head_leaves_deep_models_alone() {
        let data = toy(10, 5);
        let mut m = ResidualDeepGP::new(&ModelConfig::default(), &data.inputs).unwrap();
        let before = m.parameters().clone();
        let cache = m.cache(&data).unwrap();
        assert!(!m.set_optimal_head(&cache).unwrap());
        assert_eq!(m.parameters(), &before);
    }

    #[test]
    fn trained_elbo_approaches_exact_evidence() {
        let data = toy(20, 8);
        let cfg = ModelConfig {
            depth: 1,
            ..ModelConfig::default()
        };
        let mut m = ResidualDeepGP::new(&cfg, &data.inputs).unwrap();
        let r = train(&mut m, &data, &TrainConfig { iters: 3000, ..TrainConfig::default() }).unwrap();
        let elbo = m.elbo(&data, 1, 0).unwrap();
        let LayerPrior::Scalar(spec) = m.head().prior else { panic!() };
        let Targets::Scalar(ys) = &data.targets else { panic!() };
        let gp = ExactGp::new(spec, data.inputs.clone(), DVector::from_vec(ys.clone()), m.noise_variance()).unwrap();
        let evidence = gp.log_marginal_likelihood().unwrap();
        assert!(elbo <= evidence + 1e-9);
        assert!(evidence - elbo < 0.05 * 20.0, "elbo {elbo} evidence {evidence}");
        // deterministic single-layer objective: 50-step block averages never decrease
        let blocks: Vec<f64> = r.elbo_trace.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for w in blocks.windows(2) {
            assert!(w[1] >= w[0], "{blocks:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn constrained_parameters_stay_positive(grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..200), lr in 0.01f64..1.0) {
            let data = toy(3, 9);
            let m = ResidualDeepGP::new(&ModelConfig { depth: 1, head_truncation: Some(1), ..ModelConfig::default() }, &data.inputs).unwrap();
            let mut store = m.parameters().clone();
            let mut adam = AdamState::new(store.len(), lr);
            for g in &grads {
                let full: Vec<f64> = (0..store.len()).map(|i| g[i % 4]).collect();
                adam_step(&mut adam, &mut store.unconstrained, &full).unwrap();
            }
            let c = store.constrained();
            for e in &store.entries {
                match e.transform {
                    Transform::Softplus { floor } => {
                        for v in &c[e.offset..e.offset + e.len] {
                            prop_assert!(*v > floor || (floor > 0.0 && *v >= floor));
                            prop_assert!(*v > 0.0);
                        }
                    }
                    Transform::CholeskyFactor { n } => {
                        for i in 0..n {
                            prop_assert!(c[e.offset + crate::params::packed_index(i, i)] > 0.0);
                        }
                    }
                    Transform::Identity => {}
                }
            }
        }
    }
}
