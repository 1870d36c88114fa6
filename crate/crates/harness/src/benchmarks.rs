//! Target functions on spheres and brute-force reference minima.
//!
//! `φ(x) = (atan2(x₂, x₁), arccos x₃)` feeds the longitude into the first
//! harmonic argument and the colatitude into the second, so the targets are
//! singular where the longitude is undefined or jumps.

use std::f64::consts::{E, PI};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resdgp::sphere::{fibonacci_lattice, random_point, SpherePoint};
use serde::{Deserialize, Serialize};

use crate::acquisition::descend;
use crate::error::{HarnessError, Result};

pub fn y23(theta: f64, phi: f64) -> f64 {
    (105.0 / (32.0 * PI)).sqrt() * theta.sin().powi(3) * (3.0 * phi).sin()
}

pub fn y12(theta: f64, phi: f64) -> f64 {
    (15.0 / (8.0 * PI)).sqrt() * theta.sin() * (2.0 * phi).sin()
}

/// `(atan2(x₂, x₁), arccos x₃)`; `atan2(0, 0) = 0`.
fn swapped_angles(x: [f64; 3]) -> (f64, f64) {
    (x[1].atan2(x[0]), x[2].clamp(-1.0, 1.0).acos())
}

fn s2_coords(x: &SpherePoint) -> [f64; 3] {
    assert_eq!(x.dim(), 2, "target defined on S_2 only");
    let c = x.coords();
    [c[0], c[1], c[2]]
}

/// Regression benchmark with singularities at the poles and along a great circle.
pub fn benchmark_f(x: &SpherePoint) -> f64 {
    let c = s2_coords(x);
    let (a, b) = swapped_angles(c);
    let (ra, rb) = swapped_angles([c[0], -c[2], c[1]]);
    y23(a, b) + y12(ra, rb)
}

/// Optimisation target with a single global minimum close to the north pole.
pub fn bo_target(x: &SpherePoint) -> f64 {
    let c = s2_coords(x);
    let (a, b) = swapped_angles(c);
    y23(a, b) * (c[2] + 1.0) * (1.0 - c[2].clamp(-1.0, 1.0).acos())
}

/// Ackley function of the embedded coordinates scaled by `π`.
pub fn ackley(x: &SpherePoint) -> f64 {
    let c = x.coords();
    let n = c.len() as f64;
    let sq = c.iter().map(|v| (PI * v).powi(2)).sum::<f64>() / n;
    let cs = c.iter().map(|v| (2.0 * PI * PI * v).cos()).sum::<f64>() / n;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cs.exp() + 20.0 + E
}

/// Something to minimise on `S_d`.
pub trait Objective {
    fn dim(&self) -> usize;
    fn eval(&self, x: &SpherePoint) -> f64;
}

/// Closure-backed objective for user plug-ins.
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&SpherePoint) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &SpherePoint) -> f64 {
        (self.f)(x)
    }
}

/// Built-in targets selectable from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    BoTarget,
    Benchmark,
    /// Ackley on `S_3`.
    Ackley,
    /// `⟨x, x0⟩` with `x0` normalised.
    Linear { x0: Vec<f64> },
}

impl Default for Target {
    fn default() -> Self {
        Target::BoTarget
    }
}

impl Target {
    pub fn validate(&self) -> Result<()> {
        if let Target::Linear { x0 } = self {
            if x0.len() < 2 || x0.iter().all(|v| *v == 0.0) || x0.iter().any(|v| !v.is_finite()) {
                return Err(HarnessError::Config("linear target needs a finite nonzero x0 of length >= 2".into()));
            }
        }
        Ok(())
    }
}

impl Objective for Target {
    fn dim(&self) -> usize {
        match self {
            Target::BoTarget | Target::Benchmark => 2,
            Target::Ackley => 3,
            Target::Linear { x0 } => x0.len() - 1,
        }
    }

    fn eval(&self, x: &SpherePoint) -> f64 {
        match self {
            Target::BoTarget => bo_target(x),
            Target::Benchmark => benchmark_f(x),
            Target::Ackley => ackley(x),
            Target::Linear { x0 } => {
                let v = DVector::from_column_slice(x0);
                x.coords().dot(&v) / v.norm()
            }
        }
    }
}

/// Candidate points for brute-force search: a Fibonacci lattice on `S_2`,
/// seeded uniform points elsewhere.
pub fn search_lattice(dim: usize, n: usize, seed: u64) -> Result<Vec<SpherePoint>> {
    if dim == 2 {
        Ok(fibonacci_lattice(n)?)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| random_point(dim, &mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMinimum {
    pub point: SpherePoint,
    pub value: f64,
    /// Best value on the lattice before local refinement.
    pub lattice_value: f64,
}

/// Global minimum by lattice search over `n` points, polished by local descent
/// from the ten best lattice points.
pub fn reference_minimum(objective: &dyn Objective, n: usize) -> Result<ReferenceMinimum> {
    let lattice = search_lattice(objective.dim(), n, 0)?;
    let mut scored: Vec<(f64, usize)> = lattice.iter().enumerate().map(|(i, x)| (objective.eval(x), i)).collect();
    scored.retain(|(v, _)| v.is_finite());
    if scored.is_empty() {
        return Err(HarnessError::Config("objective is not finite anywhere on the lattice".into()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lattice_value = scored[0].0;
    let mut best = (lattice[scored[0].1].clone(), lattice_value);
    for &(_, i) in scored.iter().take(10) {
        let (x, v) = descend(&|p: &SpherePoint| objective.eval(p), &lattice[i], 200, 1e-3)?;
        if v < best.1 {
            best = (x, v);
        }
    }
    Ok(ReferenceMinimum {
        point: best.0,
        value: best.1,
        lattice_value,
    })
}
