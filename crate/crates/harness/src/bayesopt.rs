//! Bayesian optimisation on spheres with shallow and deep surrogates.
//!
//! Each iteration refits a fresh surrogate to the standardised observations and
//! minimises the negative expected improvement. The shallow surrogate uses the
//! closed-form Gaussian expectation; deep surrogates average over pathwise
//! function draws.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdgp::model::{Dataset, DeepFunction, ResidualDeepGP, Targets};
use resdgp::sphere::{random_point, SpherePoint};
use resdgp::training::{train, TrainConfig};

use crate::acquisition::{expected_improvement, gaussian_expected_improvement, minimise_multistart};
use crate::benchmarks::{search_lattice, Objective};
use crate::config::BayesOptConfig;
use crate::error::{HarnessError, Result};

/// Regret below this is reported as this value before taking logs.
pub const REGRET_FLOOR: f64 = 1e-12;

pub fn log_regret(best: f64, reference: f64) -> f64 {
    (best - reference).max(REGRET_FLOOR).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    Shallow,
    Deep,
}

/// State of one optimisation run; cloning forks the run with identical randomness.
#[derive(Clone)]
pub struct BoSession<'a> {
    objective: &'a dyn Objective,
    config: BayesOptConfig,
    rng: ChaCha8Rng,
    pub xs: Vec<SpherePoint>,
    pub ys: Vec<f64>,
    /// Best value before the first iteration.
    pub initial_best: f64,
    /// Best value after each iteration.
    pub best_trace: Vec<f64>,
    pub surrogates: Vec<Surrogate>,
}

impl<'a> BoSession<'a> {
    /// Draws the initial design uniformly at random.
    pub fn new(objective: &'a dyn Objective, config: &BayesOptConfig, seed: u64) -> Result<Self> {
        if config.initial_points == 0 {
            return Err(HarnessError::Config("at least one initial point is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<SpherePoint> = (0..config.initial_points).map(|_| random_point(objective.dim(), &mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| objective.eval(x)).collect();
        let initial_best = ys.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            objective,
            config: config.clone(),
            rng,
            xs,
            ys,
            initial_best,
            best_trace: Vec::new(),
            surrogates: Vec::new(),
        })
    }

    pub fn best(&self) -> f64 {
        self.best_trace.last().copied().unwrap_or(self.initial_best)
    }

    pub fn iterations(&self) -> usize {
        self.best_trace.len()
    }

    /// Fits `surrogate`, picks the next point by expected improvement and evaluates it.
    pub fn step(&mut self, surrogate: Surrogate) -> Result<SpherePoint> {
        let iteration = self.best_trace.len();
        let iter_seed: u64 = self.rng.random::<u64>() >> 1;
        let n = self.ys.len() as f64;
        let mean = self.ys.iter().sum::<f64>() / n;
        let var = self.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ystd: Vec<f64> = self.ys.iter().map(|y| (y - mean) / sd).collect();
        let f_best = ystd.iter().copied().fold(f64::INFINITY, f64::min);

        let mut mcfg = match surrogate {
            Surrogate::Shallow => self.config.shallow.clone(),
            Surrogate::Deep => self.config.deep.clone(),
        };
        mcfg.kmeans_seed = iter_seed;
        let data = Dataset::new(self.xs.clone(), Targets::Scalar(ystd))?;
        let mut model = ResidualDeepGP::new(&mcfg, &self.xs)?;
        let refit = TrainConfig {
            seed: iter_seed,
            ..self.config.refit.clone()
        };
        train(&mut model, &data, &refit)?;

        let acquisition: Box<dyn Fn(&SpherePoint) -> f64> = if model.depth() == 1 {
            Box::new(move |x: &SpherePoint| match model.predict(std::slice::from_ref(x), 1, 0) {
                Ok(p) => {
                    let m = p.points[0].means[0][0];
                    let v = p.points[0].covs[0][(0, 0)].max(0.0);
                    -gaussian_expected_improvement(m, v.sqrt(), f_best)
                }
                Err(_) => f64::NAN,
            })
        } else {
            let draws: Vec<DeepFunction> = (0..self.config.ei_samples as u64)
                .map(|k| model.deep_function_sample(iter_seed.wrapping_add(k)))
                .collect::<resdgp::Result<_>>()?;
            Box::new(move |x: &SpherePoint| {
                let vals: resdgp::Result<Vec<f64>> = draws.iter().map(|d| d.eval_scalar(x)).collect();
                match vals.and_then(|v| expected_improvement(&v, f_best)) {
                    Ok(ei) => -ei,
                    Err(_) => f64::NAN,
                }
            })
        };

        let mut candidates = search_lattice(self.objective.dim(), self.config.descent.candidates, iter_seed)?;
        let incumbent = self.ys.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
        candidates.push(self.xs[incumbent].clone());
        let saw_non_finite = Cell::new(false);
        let guarded = |x: &SpherePoint| {
            let v = acquisition(x);
            if !v.is_finite() {
                saw_non_finite.set(true);
            }
            v
        };
        let (mut x, value) = minimise_multistart(&guarded, &candidates, &self.config.descent)?;
        if saw_non_finite.get() || !value.is_finite() {
            return Err(self.non_finite(iteration));
        }
        if value >= 0.0 {
            // expected improvement vanishes everywhere: explore
            x = random_point(self.objective.dim(), &mut self.rng);
        }
        let y = self.objective.eval(&x);
        self.xs.push(x.clone());
        self.ys.push(y);
        self.best_trace.push(self.best().min(y));
        self.surrogates.push(surrogate);
        Ok(x)
    }

    fn non_finite(&self, iteration: usize) -> HarnessError {
        HarnessError::NonFiniteAcquisition {
            iteration,
            trace: self.best_trace.clone(),
        }
    }

    /// Runs up to `iterations` total, deep from `switch_at` onwards.
    pub fn run_until(&mut self, iterations: usize, switch_at: Option<usize>) -> Result<()> {
        while self.best_trace.len() < iterations {
            let deep = switch_at.is_some_and(|s| self.best_trace.len() >= s);
            self.step(if deep { Surrogate::Deep } else { Surrogate::Shallow })?;
        }
        Ok(())
    }
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct BoRun {
    pub seed: u64,
    pub initial_best: f64,
    pub best_trace: Vec<f64>,
    pub regret_trace: Vec<f64>,
    pub final_log_regret: f64,
}

impl BoRun {
    pub fn from_session(s: &BoSession<'_>, seed: u64, reference: f64) -> Self {
        Self {
            seed,
            initial_best: s.initial_best,
            best_trace: s.best_trace.clone(),
            regret_trace: s.best_trace.iter().map(|b| log_regret(*b, reference)).collect(),
            final_log_regret: log_regret(s.best(), reference),
        }
    }
}

pub fn run_single(objective: &dyn Objective, config: &BayesOptConfig, seed: u64, reference: f64) -> Result<BoRun> {
    let mut s = BoSession::new(objective, config, seed)?;
    s.run_until(config.iterations, config.switch_at)?;
    Ok(BoRun::from_session(&s, seed, reference))
}
