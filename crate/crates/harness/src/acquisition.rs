//! Expected improvement and multi-start Riemannian descent on the sphere.

use nalgebra::DVector;
use resdgp::sphere::{exp_map, riemannian_gradient_step, tangent_basis, SpherePoint, TangentVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Monte Carlo expected improvement for minimisation, `(1/S) Σ max(f_best - f_s, 0)`.
pub fn expected_improvement(samples: &[f64], f_best: f64) -> resdgp::Result<f64> {
    if samples.is_empty() {
        return Err(resdgp::Error::InvalidCount("expected improvement needs at least one sample".into()));
    }
    Ok(samples.iter().map(|f| (f_best - f).max(0.0)).sum::<f64>() / samples.len() as f64)
}

/// Closed form of the same expectation under `f ~ N(mean, sd²)`.
pub fn gaussian_expected_improvement(mean: f64, sd: f64, f_best: f64) -> f64 {
    let gap = f_best - mean;
    if !(sd > 0.0) {
        return gap.max(0.0);
    }
    let z = gap / sd;
    let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (gap * cdf + sd * pdf).max(0.0)
}

/// Step used for central differences along tangent directions.
pub const FD_STEP: f64 = 1e-5;

/// Riemannian gradient of `f` at `x` from central differences along geodesics.
pub fn tangent_gradient(f: &dyn Fn(&SpherePoint) -> f64, x: &SpherePoint) -> Result<DVector<f64>> {
    let basis = tangent_basis(x.coords());
    let mut g = DVector::zeros(x.coords().len());
    for j in 0..basis.ncols() {
        let b = basis.column(j).into_owned();
        let plus = exp_map(x, &TangentVector::new(x.clone(), &b * FD_STEP)?);
        let minus = exp_map(x, &TangentVector::new(x.clone(), &b * -FD_STEP)?);
        g += b * ((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
    }
    Ok(g)
}

/// Settings of [`minimise_multistart`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentConfig {
    pub starts: usize,
    pub steps: usize,
    /// Initial geodesic step length along the normalised descent direction.
    pub step: f64,
    /// Size of the candidate lattice the starts are picked from.
    pub candidates: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            starts: 20,
            steps: 100,
            step: 0.05,
            candidates: 1000,
        }
    }
}

/// Normalised-gradient descent with step halving whenever a step fails to decrease `f`.
pub fn descend(f: &dyn Fn(&SpherePoint) -> f64, x0: &SpherePoint, steps: usize, step: f64) -> Result<(SpherePoint, f64)> {
    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut h = step;
    'outer: for _ in 0..steps {
        let g = tangent_gradient(f, &x)?;
        let norm = g.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        let dir = g / norm;
        loop {
            let cand = riemannian_gradient_step(&x, &dir, h)?;
            let fc = f(&cand);
            if fc < fx {
                x = cand;
                fx = fc;
                break;
            }
            h *= 0.5;
            if h < 1e-12 {
                break 'outer;
            }
        }
    }
    Ok((x, fx))
}

/// Minimises `f` from the `starts` best of `candidates` and returns the best end point.
pub fn minimise_multistart(
    f: &dyn Fn(&SpherePoint) -> f64,
    candidates: &[SpherePoint],
    config: &DescentConfig,
) -> Result<(SpherePoint, f64)> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().enumerate().map(|(i, x)| (f(x), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(SpherePoint, f64)> = None;
    for &(_, i) in scored.iter().take(config.starts.max(1)) {
        let (x, v) = descend(f, &candidates[i], config.steps, config.step)?;
        if best.as_ref().is_none_or(|b| v < b.1 || b.1.is_nan()) {
            best = Some((x, v));
        }
    }
    Ok(best.expect("at least one start"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use resdgp::sphere::fibonacci_lattice;

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(&[2.0, 3.0], 1.0).unwrap(), 0.0);
        assert_eq!(expected_improvement(&[0.25], 1.0).unwrap(), 0.75);
        assert_eq!(expected_improvement(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        assert!(expected_improvement(&[], 1.0).is_err());
    }

    #[test]
    fn gaussian_ei_matches_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = Normal::new(0.3, 0.7).unwrap();
        let s: Vec<f64> = (0..400_000).map(|_| d.sample(&mut rng)).collect();
        let mc = expected_improvement(&s, 0.1).unwrap();
        let exact = gaussian_expected_improvement(0.3, 0.7, 0.1);
        assert!((mc - exact).abs() < 3e-3, "{mc} vs {exact}");
        assert_eq!(gaussian_expected_improvement(0.3, 0.0, 1.0), 0.7);
    }

    #[test]
    fn gradient_of_linear_function() {
        let a = DVector::from_vec(vec![0.2, -1.0, 0.5]);
        let f = |x: &SpherePoint| x.coords().dot(&a);
        let x = SpherePoint::from_spherical(1.1, 0.4);
        let g = tangent_gradient(&f, &x).unwrap();
        let expected = &a - x.coords() * x.coords().dot(&a);
        assert!((g - expected).norm() < 1e-8);
    }

    #[test]
    fn descent_reaches_minimum_and_stays_on_sphere() {
        let a = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let f = |x: &SpherePoint| x.coords().dot(&a);
        let starts = fibonacci_lattice(50).unwrap();
        let (x, v) = minimise_multistart(&f, &starts, &DescentConfig::default()).unwrap();
        assert!((x.coords().norm() - 1.0).abs() < 1e-12);
        assert!((v + 1.0).abs() < 1e-6);
    }
}
