//! End-to-end experiments producing [`Report`]s.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use resdgp::model::{nlpd_from_prediction, mse_from_prediction, Dataset, HeadKind, ModelConfig, ResidualDeepGP, Targets};
use resdgp::sphere::{fibonacci_lattice, tangent_project, SpherePoint};
use resdgp::training::{finite_difference_check, train};

use crate::bayesopt::{BoRun, BoSession};
use crate::benchmarks::{benchmark_f, reference_minimum};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::data::{read_records_path, tangent_to_record};
use crate::embed::{column_stats, embed_euclidean};
use crate::error::{HarnessError, Result};
use crate::report::{Report, Table};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(HarnessError::Config(format!(
            "config is for a {} experiment, not {}",
            cfg.kind.name(),
            kind.name()
        )));
    }
    cfg.validate()
}

/// Benchmark values plus `N(0, noise_variance)` noise drawn from `(seed, n)`.
pub fn noisy_benchmark(inputs: Vec<SpherePoint>, noise_variance: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(inputs.len() as u64);
    let sd = noise_variance.sqrt();
    let y = inputs
        .iter()
        .map(|x| benchmark_f(x) + sd * normal(&mut rng))
        .collect();
    Ok(Dataset::new(inputs, Targets::Scalar(y))?)
}

/// One synthetic-regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRun {
    pub n: usize,
    pub depth: usize,
    pub model: ModelConfig,
    pub seed: u64,
    pub nlpd: f64,
    pub mse: f64,
    pub elbo_trace: Vec<f64>,
}

/// Trains `model` on `n` lattice points with noisy benchmark targets and scores it on `test`.
pub fn synthetic_fit(cfg: &ExperimentConfig, model: &ModelConfig, n: usize, seed: u64, test: &Dataset) -> Result<SyntheticRun> {
    let train_data = noisy_benchmark(fibonacci_lattice(n)?, cfg.synthetic.noise_variance, seed)?;
    let mcfg = ModelConfig {
        kmeans_seed: seed,
        ..model.clone()
    };
    let mut gp = ResidualDeepGP::new(&mcfg, &train_data.inputs)?;
    let tcfg = resdgp::training::TrainConfig {
        seed,
        ..cfg.training.clone()
    };
    let result = train(&mut gp, &train_data, &tcfg)?;
    let pred = gp.predict(&test.inputs, cfg.eval.samples, seed)?;
    Ok(SyntheticRun {
        n,
        depth: mcfg.depth,
        model: mcfg,
        seed,
        nlpd: nlpd_from_prediction(&pred, test, gp.noise_variance())?,
        mse: mse_from_prediction(&pred, &test.targets),
        elbo_trace: result.elbo_trace,
    })
}

/// Noiseless benchmark values on a Fibonacci lattice.
pub fn benchmark_test_set(points: usize) -> Result<Dataset> {
    let xs = fibonacci_lattice(points)?;
    let y = xs.iter().map(benchmark_f).collect();
    Ok(Dataset::new(xs, Targets::Scalar(y))?)
}

/// Sweep over training sizes, depths, families, field kinds and seeds.
pub fn run_synthetic_regression(cfg: &ExperimentConfig) -> Result<Report> {
    expect_kind(cfg, ExperimentKind::Synthetic)?;
    let s = &cfg.synthetic;
    let test = benchmark_test_set(s.test_points)?;
    let mut report = Report::new(cfg);
    let mut table = Table::new("nlpd_table", &["n", "depth", "family", "kind", "seed", "nlpd", "mse"]);
    let mut traces = Table::new("elbo_trace", &["run", "iteration", "elbo"]);
    let (mut nlpd, mut mse, mut elbo) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &s.n_train {
        for &depth in &s.depths {
            for &family in &s.families {
                for &kind in &s.kinds {
                    for k in 0..s.seeds as u64 {
                        let model = ModelConfig {
                            depth,
                            family,
                            hidden_kind: kind,
                            ..cfg.model.clone()
                        };
                        let run = synthetic_fit(cfg, &model, n, cfg.seed + k, &test)?;
                        let id = table.rows.len();
                        table.push(vec![
                            n.to_string(),
                            depth.to_string(),
                            json_name(&family),
                            json_name(&kind),
                            run.seed.to_string(),
                            run.nlpd.to_string(),
                            run.mse.to_string(),
                        ]);
                        for (i, e) in run.elbo_trace.iter().enumerate() {
                            traces.push(vec![id.to_string(), i.to_string(), e.to_string()]);
                        }
                        nlpd.push(run.nlpd);
                        mse.push(run.mse);
                        elbo.push(run.elbo_trace);
                    }
                }
            }
        }
    }
    report.set("noise_variance", s.noise_variance);
    report.set("test_points", s.test_points);
    report.set("nlpd", nlpd);
    report.set("mse", mse);
    report.set("elbo_trace", elbo);
    report.tables.push(table);
    report.tables.push(traces);
    Ok(report)
}

fn json_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Seeded split into `(train, test)` with `round(n·fraction)` test points, at least one each.
pub fn holdout(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    if n < 2 {
        return Err(HarnessError::Config("holdout needs at least two records".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let (test, train) = idx.split_at(n_test);
    Ok((data.select(train), data.select(test)))
}

/// Vector-field fit and its test-set metrics.
#[derive(Debug, Clone)]
pub struct VectorFieldFit {
    pub model: ResidualDeepGP,
    pub nlpd: f64,
    pub mse: f64,
    pub uncertainty: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub elbo_trace: Vec<f64>,
}

pub fn fit_vector_field(cfg: &ExperimentConfig, train_data: &Dataset, test: &Dataset) -> Result<VectorFieldFit> {
    if cfg.model.head != HeadKind::Vector {
        return Err(HarnessError::Config("vector-field regression needs a vector head".into()));
    }
    let mcfg = ModelConfig {
        kmeans_seed: cfg.seed,
        ..cfg.model.clone()
    };
    let mut gp = ResidualDeepGP::new(&mcfg, &train_data.inputs)?;
    let tcfg = resdgp::training::TrainConfig {
        seed: cfg.seed,
        ..cfg.training.clone()
    };
    let result = train(&mut gp, train_data, &tcfg)?;
    let pred = gp.predict(&test.inputs, cfg.eval.samples, cfg.seed)?;
    Ok(VectorFieldFit {
        nlpd: nlpd_from_prediction(&pred, test, gp.noise_variance())?,
        mse: mse_from_prediction(&pred, &test.targets),
        uncertainty: pred.uncertainty(),
        means: pred.mixture_means(),
        elbo_trace: result.elbo_trace,
        model: gp,
    })
}

/// Vector-field regression from `data.csv` (and optionally `data.test_csv`).
pub fn run_vectorfield_regression(cfg: &ExperimentConfig) -> Result<Report> {
    expect_kind(cfg, ExperimentKind::Vectorfield)?;
    let path = cfg.data.csv.as_deref().expect("validated");
    let ingested = read_records_path(path)?;
    let mut rejected = ingested.rejected_poles;
    let all = ingested.to_dataset()?;
    let (train_data, test) = match &cfg.data.test_csv {
        Some(p) => {
            let t = read_records_path(p)?;
            rejected += t.rejected_poles;
            (all, t.to_dataset()?)
        }
        None => holdout(&all, cfg.data.test_fraction, cfg.seed)?,
    };
    let fit = fit_vector_field(cfg, &train_data, &test)?;

    let mut report = Report::new(cfg);
    report.set("nlpd", fit.nlpd);
    report.set("mse", fit.mse);
    report.set("uncertainty", &fit.uncertainty);
    report.set("elbo_trace", &fit.elbo_trace);
    report.set("rejected_poles", rejected);
    report.set("n_train", train_data.len());
    report.set("n_test", test.len());
    let mut table = Table::new("predictions", &["lat", "lon", "u", "v", "u_mean", "v_mean", "uncertainty"]);
    let Targets::Vector(truth) = &test.targets else {
        unreachable!("vector-field data has vector targets")
    };
    for (((x, t), m), s) in test.inputs.iter().zip(truth).zip(&fit.means).zip(&fit.uncertainty) {
        let obs = tangent_to_record(x, t)?;
        let est = tangent_to_record(x, m)?;
        table.push(vec![
            obs.lat.to_string(),
            obs.lon.to_string(),
            obs.u.to_string(),
            obs.v.to_string(),
            est.u.to_string(),
            est.v.to_string(),
            s.to_string(),
        ]);
    }
    report.tables.push(table);
    report.tables.push(trace_table("elbo_trace", "elbo", &fit.elbo_trace));
    Ok(report)
}

fn trace_table(name: &str, column: &str, trace: &[f64]) -> Table {
    let mut t = Table::new(name, &["iteration", column]);
    for (i, v) in trace.iter().enumerate() {
        t.push(vec![i.to_string(), v.to_string()]);
    }
    t
}

/// Bayesian optimisation over `bayesopt.runs` seeds; the regret matrix is seeds × iterations.
pub fn run_bayesopt(cfg: &ExperimentConfig) -> Result<Report> {
    expect_kind(cfg, ExperimentKind::Bayesopt)?;
    let b = &cfg.bayesopt;
    let reference = reference_minimum(&b.target, b.reference_points)?;
    let mut runs = Vec::new();
    for k in 0..b.runs as u64 {
        let seed = cfg.seed + k;
        let mut session = BoSession::new(&b.target, b, seed)?;
        session.run_until(b.iterations, b.switch_at)?;
        runs.push(BoRun::from_session(&session, seed, reference.value));
    }
    Ok(bayesopt_report(cfg, reference.value, &runs))
}

pub fn bayesopt_report(cfg: &ExperimentConfig, reference: f64, runs: &[BoRun]) -> Report {
    let mut report = Report::new(cfg);
    report.set("reference_minimum", reference);
    report.set("regret_trace", runs.iter().map(|r| r.regret_trace.clone()).collect::<Vec<_>>());
    report.set("best_trace", runs.iter().map(|r| r.best_trace.clone()).collect::<Vec<_>>());
    report.set("initial_best", runs.iter().map(|r| r.initial_best).collect::<Vec<_>>());
    report.set("final_log_regret", runs.iter().map(|r| r.final_log_regret).collect::<Vec<_>>());
    let mut table = Table::new("regret", &["seed", "iteration", "best", "log_regret"]);
    for r in runs {
        for (i, (b, g)) in r.best_trace.iter().zip(&r.regret_trace).enumerate() {
            table.push(vec![r.seed.to_string(), (i + 1).to_string(), b.to_string(), g.to_string()]);
        }
    }
    report.tables.push(table);
    report
}

/// Rows of `x1,…,xd,y` from a CSV with a header line.
pub fn read_regression_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HarnessError::Row { line: 1, message: e.to_string() })?;
    let width = rdr.headers().map_err(|e| HarnessError::Row { line: 1, message: e.to_string() })?.len();
    if width < 2 {
        return Err(HarnessError::Row {
            line: 1,
            message: "need at least one feature column and a target column".into(),
        });
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HarnessError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| HarnessError::Row {
                line,
                message: "expected finite numbers".into(),
            })?;
        if vals.len() != width {
            return Err(HarnessError::Row {
                line,
                message: format!("expected {width} fields, got {}", vals.len()),
            });
        }
        ys.push(vals[width - 1]);
        xs.push(vals[..width - 1].to_vec());
    }
    if xs.len() < 2 {
        return Err(HarnessError::Config(format!("{}: need at least two rows", path.display())));
    }
    Ok((xs, ys))
}

/// `y = sin(x₁) + ½cos(2x₂) + …` on `[-2, 2]^d` with Gaussian noise.
pub fn synthetic_euclidean(n: usize, d: usize, noise: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-2.0, 2.0).expect("valid range");
    let e = Normal::new(0.0, noise.max(0.0).sqrt()).expect("valid sd");
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| u.sample(&mut rng)).collect()).collect();
    let ys = xs
        .iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .map(|(j, v)| ((j + 1) as f64 * v).sin() / (j + 1) as f64)
                .sum::<f64>()
                + e.sample(&mut rng)
        })
        .collect();
    (xs, ys)
}

/// Regression on Euclidean data embedded into `S_d`; features and targets are standardised with training statistics.
pub fn run_embed_regression(cfg: &ExperimentConfig) -> Result<Report> {
    expect_kind(cfg, ExperimentKind::Embed)?;
    let (xs, ys) = match &cfg.data.csv {
        Some(p) => read_regression_csv(p)?,
        None => synthetic_euclidean(cfg.embed.synthetic_points, cfg.embed.synthetic_features, cfg.embed.synthetic_noise, cfg.seed),
    };
    let d = xs[0].len();
    let mut model = cfg.model.clone();
    model.dim = d;
    model.kmeans_seed = cfg.seed;
    model.validate()?;

    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((xs.len() as f64 * cfg.data.test_fraction).round() as usize).clamp(1, xs.len() - 1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| xs[i].clone()).collect();
    let (mx, sx) = column_stats(&train_x);
    let train_y: Vec<Vec<f64>> = train_idx.iter().map(|&i| vec![ys[i]]).collect();
    let (my, sy) = column_stats(&train_y);
    let make = |ids: &[usize]| -> Result<Dataset> {
        let pts = ids
            .iter()
            .map(|&i| {
                let z: Vec<f64> = xs[i].iter().zip(&mx).zip(&sx).map(|((v, m), s)| (v - m) / s).collect();
                embed_euclidean(&z, cfg.embed.bias)
            })
            .collect::<resdgp::Result<Vec<_>>>()?;
        let t = ids.iter().map(|&i| (ys[i] - my[0]) / sy[0]).collect();
        Ok(Dataset::new(pts, Targets::Scalar(t))?)
    };
    let train_data = make(train_idx)?;
    let test = make(test_idx)?;

    let mut gp = ResidualDeepGP::new(&model, &train_data.inputs)?;
    let tcfg = resdgp::training::TrainConfig {
        seed: cfg.seed,
        ..cfg.training.clone()
    };
    let result = train(&mut gp, &train_data, &tcfg)?;
    let pred = gp.predict(&test.inputs, cfg.eval.samples, cfg.seed)?;
    let mut report = Report::new(cfg);
    report.set("nlpd", nlpd_from_prediction(&pred, &test, gp.noise_variance())?);
    report.set("mse", mse_from_prediction(&pred, &test.targets));
    report.set("elbo_trace", &result.elbo_trace);
    report.set("uncertainty", pred.uncertainty());
    report.set("target_scale", sy[0]);
    report.set("n_train", train_data.len());
    report.set("n_test", test.len());
    report.tables.push(trace_table("elbo_trace", "elbo", &result.elbo_trace));
    Ok(report)
}

/// Analytic ELBO gradient against central differences on a small lattice dataset.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Report> {
    expect_kind(cfg, ExperimentKind::Gradcheck)?;
    let g = &cfg.gradcheck;
    let xs = fibonacci_lattice(g.points)?;
    let targets = match cfg.model.head {
        HeadKind::Scalar => Targets::Scalar(xs.iter().map(benchmark_f).collect()),
        HeadKind::Vector => {
            let a = DVector::from_vec(vec![0.3, -1.0, 0.6]);
            Targets::Vector(
                xs.iter()
                    .map(|x| tangent_project(x, &(&a * (1.0 + benchmark_f(x)))).vec)
                    .collect(),
            )
        }
    };
    let data = Dataset::new(xs, targets)?;
    let model = ModelConfig {
        kmeans_seed: cfg.seed,
        ..cfg.model.clone()
    };
    let mut gp = ResidualDeepGP::new(&model, &data.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u: Vec<f64> = gp
        .parameters()
        .unconstrained
        .iter()
        .map(|v| v + g.perturbation * normal(&mut rng))
        .collect();
    gp.set_unconstrained(u)?;
    let cache = gp.cache(&data)?;
    let check = finite_difference_check(&gp, &cache, None, g.step, g.samples, cfg.seed)?;

    let mut report = Report::new(cfg);
    report.set("max_relative_error", check.worst_error);
    report.set("worst_parameter", &check.worst_name);
    report.set("parameters", check.analytic.len());
    report.set("passed", check.worst_error < g.tolerance);
    let mut table = Table::new("gradients", &["index", "name", "analytic", "numeric", "relative_error"]);
    for i in 0..check.analytic.len() {
        table.push(vec![
            i.to_string(),
            gp.parameters().name_of(i).to_string(),
            check.analytic[i].to_string(),
            check.numeric[i].to_string(),
            check.relative_errors[i].to_string(),
        ]);
    }
    report.tables.push(table);
    Ok(report)
}
