//! Acceptance criteria 1–10, one pass/fail line each.
//!
//! Criteria 8 and 9 reproduce trends at desk scale and take well over an hour
//! on one CPU.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use resdgp::gvf::{gvf_prior_function_sample, GvfPrior};
use resdgp::harmonics::{laplace_eigenvalue, scalar_harmonics_s2, vector_harmonics_s2};
use resdgp::kernels::{
    hodge_curl_kernel, hodge_div_kernel, hodge_normalizer, scalar_matern_kernel, scalar_normalizer, spectral_weight,
    HodgeSpec, MaternSpec, Smoothness,
};
use resdgp::model::{Dataset, FamilyKind, HeadKind, ModelConfig, ResidualDeepGP, Targets, TrainFlags};
use resdgp::sphere::{fibonacci_lattice, random_point, tangent_basis, SpherePoint};
use resdgp::training::{train, TrainConfig};
use resdgp::variational::{exact_posterior, kl_whitened, ExactGp, LayerPrior, VariationalLayer};
use resdgp_harness::bayesopt::{log_regret, BoSession, Surrogate};
use resdgp_harness::benchmarks::{reference_minimum, Target};
use resdgp_harness::config::{ExperimentConfig, ExperimentKind};
use resdgp_harness::experiments::{benchmark_test_set, fit_vector_field, run_gradcheck, synthetic_fit};

type Outcome = (bool, String);

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pairs(n: usize, seed: u64) -> Vec<(SpherePoint, SpherePoint)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (random_point(2, &mut rng), random_point(2, &mut rng))).collect()
}

fn matern(nu: f64, kappa: f64, sigma2: f64, k: usize) -> MaternSpec {
    MaternSpec::new(Smoothness::Finite(nu), kappa, sigma2, k, 2).unwrap()
}

/// Scalar kernel from the Gegenbauer series against the explicit harmonic double sum.
fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..=8 {
        for (nu, kappa, s2) in [(0.5, 0.7, 1.0), (1.5, 1.0, 2.3), (2.5, 0.4, 0.6)] {
            let spec = matern(nu, kappa, s2, k);
            let c = scalar_normalizer(&spec);
            for (x, y) in pairs(100, 10 + k as u64) {
                let hx = scalar_harmonics_s2(&x, k).unwrap();
                let hy = scalar_harmonics_s2(&y, k).unwrap();
                let mut sum = 0.0;
                let mut idx = 0;
                for deg in 0..=k {
                    let w = spectral_weight(&spec, laplace_eigenvalue(deg, 2));
                    for _ in 0..2 * deg + 1 {
                        sum += w * hx[idx] * hy[idx];
                        idx += 1;
                    }
                }
                let brute = s2 * sum / c;
                let closed = scalar_matern_kernel(&spec, &x, &y).unwrap();
                worst = worst.max((brute - closed).abs());
            }
        }
    }
    (worst <= 1e-10, format!("max |error| {worst:.2e} over K = 0..8, 100 pairs, 3 kernels"))
}

/// Hodge div/curl kernels against sums over explicit eigenfields, and tangency of their output.
fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut tangency: f64 = 0.0;
    for k in 1..=6 {
        for (nu, kappa, s2) in [(1.5, 1.0, 1.0), (0.5, 0.6, 2.0)] {
            let spec = matern(nu, kappa, s2, k);
            let c = hodge_normalizer(&spec);
            for (x, y) in pairs(50, 40 + k as u64) {
                let (dx, cx) = vector_harmonics_s2(&x, k).unwrap();
                let (dy, cy) = vector_harmonics_s2(&y, k).unwrap();
                let mut div = DMatrix::zeros(3, 3);
                let mut curl = DMatrix::zeros(3, 3);
                let mut idx = 0;
                for deg in 1..=k {
                    let w = spectral_weight(&spec, laplace_eigenvalue(deg, 2));
                    for _ in 0..2 * deg + 1 {
                        div += &dx[idx] * dy[idx].transpose() * w;
                        curl += &cx[idx] * cy[idx].transpose() * w;
                        idx += 1;
                    }
                }
                // orthonormal eigenfields carry the 1/(4π) of the addition theorem
                let scale = s2 * 4.0 * PI / c;
                let kd = hodge_div_kernel(&spec, &x, &y).unwrap();
                let kc = hodge_curl_kernel(&spec, &x, &y).unwrap();
                worst = worst.max((div * scale - &kd).amax()).max((curl * scale - &kc).amax());
                for m in [&kd, &kc] {
                    tangency = tangency
                        .max((x.coords().transpose() * m).amax())
                        .max((m * y.coords()).amax());
                }
            }
        }
    }
    (
        worst <= 1e-8 && tangency <= 1e-10,
        format!("max |error| {worst:.2e}, max normal component {tangency:.2e} over K = 1..6, 50 pairs"),
    )
}

fn block_len(model: &ResidualDeepGP, name: &str) -> usize {
    model.parameters().entry(name).map_or(0, |e| e.len)
}

/// Inducing-variable counts of the interdomain heads at the stated truncations.
fn criterion_3() -> Outcome {
    let xs = fibonacci_lattice(4).unwrap();
    let scalar = ResidualDeepGP::new(
        &ModelConfig {
            depth: 1,
            head_truncation: Some(6),
            ..ModelConfig::default()
        },
        &xs,
    )
    .unwrap();
    let vector = |k: usize| {
        ResidualDeepGP::new(
            &ModelConfig {
                depth: 1,
                head: HeadKind::Vector,
                head_truncation: Some(k),
                ..ModelConfig::default()
            },
            &xs,
        )
        .unwrap()
    };
    let counts = [
        block_len(&scalar, "head.block0.mean"),
        block_len(&vector(5), "head.block0.mean"),
        block_len(&vector(9), "head.block0.mean"),
    ];
    (counts == [49, 70, 198], format!("scalar K=6: {}, Hodge K=5: {}, Hodge K=9: {}", counts[0], counts[1], counts[2]))
}

/// Analytic gradient against central differences on a 2-layer model with 8 inducing points and 16 data points.
fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig::default_for(ExperimentKind::Gradcheck);
    assert_eq!((cfg.model.depth, cfg.model.num_inducing, cfg.gradcheck.points), (2, 8, 16));
    let report = run_gradcheck(&cfg).unwrap();
    let err = report.get_f64("max_relative_error").unwrap();
    let n = report.metrics["parameters"].as_u64().unwrap();
    (
        err < 1e-4,
        format!("max relative error {err:.2e} over {n} parameters (worst {})", report.metrics["worst_parameter"]),
    )
}

/// Whitened-identity states reproduce the prior and have zero KL.
fn criterion_5() -> Outcome {
    let xs = pairs(25, 5).into_iter().flat_map(|(a, b)| [a, b]).collect::<Vec<_>>();
    let z = fibonacci_lattice(12).unwrap();
    let hodge = GvfPrior::hodge(HodgeSpec::new(matern(1.5, 1.0, 1.0, 5), matern(2.5, 0.7, 0.5, 5)).unwrap());
    let projected = GvfPrior::projected(matern(1.5, 0.8, 1.0, 6)).unwrap();
    let priors = [
        LayerPrior::Scalar(matern(1.5, 1.0, 1.3, 6)),
        LayerPrior::Gvf(hodge),
        LayerPrior::Gvf(projected),
    ];
    let mut worst: f64 = 0.0;
    let mut kl_max: f64 = 0.0;
    for prior in priors {
        for layer in [
            VariationalLayer::interdomain(prior.clone()).unwrap(),
            VariationalLayer::inducing(prior.clone(), z.clone()).unwrap(),
        ] {
            let p = layer.prior_moments(&xs).unwrap();
            let q = layer.posterior(&xs).unwrap();
            for (a, b) in p.iter().zip(&q) {
                worst = worst.max((&a.mean - &b.mean).amax()).max((&a.cov - &b.cov).amax());
            }
            kl_max = kl_max.max(kl_whitened(&layer.state).abs());
        }
    }
    (
        worst <= 1e-10 && kl_max == 0.0,
        format!("max moment deviation {worst:.2e} at 50 points, max |KL| {kl_max:e}"),
    )
}

/// Sparse GP with inducing points at the 20 training inputs against the exact posterior.
fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let truth = |x: &SpherePoint| {
        let c = x.coords();
        (2.0 * c[0]).sin() + c[1] * c[2]
    };
    let xs: Vec<SpherePoint> = (0..20).map(|_| random_point(2, &mut rng)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| truth(x) + 0.1 * normal(&mut rng)).collect();
    let data = Dataset::new(xs.clone(), Targets::Scalar(ys.clone())).unwrap();
    let test_x = fibonacci_lattice(500).unwrap();
    let test_y: Vec<f64> = test_x.iter().map(|x| truth(x) + 0.1 * normal(&mut rng)).collect();
    let test = Dataset::new(test_x.clone(), Targets::Scalar(test_y.clone())).unwrap();

    let cfg = ModelConfig {
        depth: 1,
        family: FamilyKind::Il,
        num_inducing: 20,
        ..ModelConfig::default()
    };
    let mut model = ResidualDeepGP::new(&cfg, &xs).unwrap();
    train(
        &mut model,
        &data,
        &TrainConfig {
            iters: 2000,
            lr: 0.01,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let sparse = model.nlpd(&test, 1, 0).unwrap();

    let LayerPrior::Scalar(spec) = model.head().prior else {
        unreachable!("scalar head")
    };
    let s2 = model.noise_variance();
    let gp = ExactGp::new(spec, xs, DVector::from_vec(ys), s2).unwrap();
    let (mean, cov) = exact_posterior(&gp, &test_x).unwrap();
    let exact = test_y
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let v = cov[(i, i)] + s2;
            0.5 * ((2.0 * PI * v).ln() + (y - mean[i]).powi(2) / v)
        })
        .sum::<f64>()
        / test_y.len() as f64;
    let gap = (sparse - exact).abs();
    (gap <= 0.05, format!("sparse NLPD {sparse:.4}, exact {exact:.4}, gap {gap:.2e}"))
}

/// A 3-layer model with vanishing hidden variance behaves like the 1-layer model.
fn criterion_7() -> Outcome {
    let test = benchmark_test_set(500).unwrap();
    let hidden_cfg = ModelConfig {
        depth: 3,
        hidden_variance: Some(1e-12),
        ..ModelConfig::default()
    };
    let shallow_cfg = ModelConfig {
        depth: 1,
        ..ModelConfig::default()
    };
    let deep = ResidualDeepGP::new(&hidden_cfg, &test.inputs).unwrap();
    let shallow = ResidualDeepGP::new(&shallow_cfg, &test.inputs).unwrap();
    let d_nlpd = (deep.nlpd(&test, 10, 1).unwrap() - shallow.nlpd(&test, 10, 1).unwrap()).abs();
    let d_mse = (deep.mse(&test, 10, 1).unwrap() - shallow.mse(&test, 10, 1).unwrap()).abs();

    // same comparison with a fitted head carried over into the deep model
    let train_data = benchmark_test_set(200).unwrap();
    let mut fitted = shallow.clone();
    train(
        &mut fitted,
        &train_data,
        &TrainConfig {
            iters: 300,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let hidden: Vec<VariationalLayer> = (0..2)
        .map(|_| VariationalLayer::interdomain(hidden_cfg.hidden_prior().unwrap()).unwrap())
        .collect();
    let carried = ResidualDeepGP::from_layers(hidden, fitted.head(), fitted.noise_variance(), TrainFlags::default()).unwrap();
    let f_nlpd = (carried.nlpd(&test, 10, 1).unwrap() - fitted.nlpd(&test, 10, 1).unwrap()).abs();
    let f_mse = (carried.mse(&test, 10, 1).unwrap() - fitted.mse(&test, 10, 1).unwrap()).abs();
    let worst = d_nlpd.max(d_mse).max(f_nlpd).max(f_mse);
    (
        worst <= 1e-6,
        format!(
            "identity head: |ΔNLPD| {d_nlpd:.1e}, |ΔMSE| {d_mse:.1e}; fitted head: |ΔNLPD| {f_nlpd:.1e}, |ΔMSE| {f_mse:.1e}"
        ),
    )
}

/// Deep Hodge+IV models beat the shallow one on dense data and do not degrade on sparse data.
fn criterion_8() -> Outcome {
    let cfg = ExperimentConfig::default_for(ExperimentKind::Synthetic);
    let test = benchmark_test_set(cfg.synthetic.test_points).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [100, 800, 1600] {
        let mut mean = [0.0; 3];
        for (d, slot) in mean.iter_mut().enumerate() {
            let model = ModelConfig {
                depth: d + 1,
                family: FamilyKind::Iv,
                hidden_kind: resdgp::gvf::GvfKind::Hodge,
                ..cfg.model.clone()
            };
            let runs: Vec<f64> = (0..5).map(|s| synthetic_fit(&cfg, &model, n, s, &test).unwrap().nlpd).collect();
            *slot = runs.iter().sum::<f64>() / 5.0;
        }
        let deep = mean[1].min(mean[2]);
        let pass = if n == 100 { deep <= mean[0] + 0.1 } else { deep < mean[0] };
        ok &= pass;
        lines.push(format!("N={n}: L1 {:.4} L2 {:.4} L3 {:.4}", mean[0], mean[1], mean[2]));
    }
    (ok, lines.join("; "))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 180 shallow + 20 deep iterations against 200 shallow on the irregular target, 15 seeds.
fn criterion_9() -> Outcome {
    let cfg = ExperimentConfig::default_for(ExperimentKind::Bayesopt);
    let b = &cfg.bayesopt;
    let target = Target::BoTarget;
    let reference = reference_minimum(&target, b.reference_points).unwrap().value;
    let (mut mixed, mut shallow) = (Vec::new(), Vec::new());
    let mut monotone = true;
    for seed in 0..15 {
        let mut s = BoSession::new(&target, b, seed).unwrap();
        s.run_until(180, None).unwrap();
        let mut deep = s.clone();
        for _ in 0..20 {
            s.step(Surrogate::Shallow).unwrap();
            deep.step(Surrogate::Deep).unwrap();
        }
        for run in [&s, &deep] {
            monotone &= run.best_trace.windows(2).all(|w| w[1] <= w[0]) && run.best_trace[0] <= run.initial_best;
        }
        shallow.push(log_regret(s.best(), reference));
        mixed.push(log_regret(deep.best(), reference));
    }
    let (m_mixed, m_shallow) = (median(&mut mixed), median(&mut shallow));
    (
        m_mixed <= m_shallow && monotone,
        format!("median final log10 regret: shallow+deep {m_mixed:.3}, shallow {m_shallow:.3}; traces nonincreasing: {monotone}"),
    )
}

/// A Hodge prior draw plus noise is recovered by a 1-layer Hodge+IV model.
fn criterion_10() -> Outcome {
    let noise: f64 = 1e-2;
    let prior = GvfPrior::hodge(HodgeSpec::new(matern(1.5, 1.0, 1.0, 5), matern(1.5, 1.0, 1.0, 5)).unwrap());
    let field = gvf_prior_function_sample(&prior, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let train_x = fibonacci_lattice(400).unwrap();
    let train_y: Vec<DVector<f64>> = train_x
        .iter()
        .map(|x| {
            let b = tangent_basis(x.coords());
            let e = DVector::from_vec(vec![normal(&mut rng), normal(&mut rng)]);
            field.eval(x).unwrap().vec + b * e * noise.sqrt()
        })
        .collect();
    let test_x = fibonacci_lattice(1000).unwrap();
    let test_y: Vec<DVector<f64>> = test_x.iter().map(|x| field.eval(x).unwrap().vec).collect();
    let train_data = Dataset::new(train_x, Targets::Vector(train_y)).unwrap();
    let test = Dataset::new(test_x, Targets::Vector(test_y)).unwrap();
    let mut cfg = ExperimentConfig::default_for(ExperimentKind::Vectorfield);
    cfg.data.csv = Some("unused.csv".into());
    assert_eq!((cfg.model.depth, cfg.model.head, cfg.model.family), (1, HeadKind::Vector, FamilyKind::Iv));
    let fit = fit_vector_field(&cfg, &train_data, &test).unwrap();
    (
        fit.mse <= 2.0 * noise,
        format!("test MSE {:.2e} vs bound {:.1e}, learned noise variance {:.2e}", fit.mse, 2.0 * noise, fit.model.noise_variance()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("addition-theorem equivalence", criterion_1),
        ("Hodge kernel correctness", criterion_2),
        ("feature counts", criterion_3),
        ("gradient contract", criterion_4),
        ("whitened-identity neutrality", criterion_5),
        ("sparse-vs-exact oracle", criterion_6),
        ("shallow reversion", criterion_7),
        ("synthetic depth trend", criterion_8),
        ("Bayesian optimisation trend", criterion_9),
        ("vector-field self-consistency", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = run();
        let verdict = if pass { "PASS" } else { "FAIL" };
        // Written to the raw handle so the line shows even when output is captured.
        let line = format!("criterion {id:>2} {verdict} {name}: {detail} [{:.1} s]\n", start.elapsed().as_secs_f64());
        let _ = std::io::stdout().lock().write_all(line.as_bytes());
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
