//! Truncated Matérn kernels on spheres.
//!
//! Scalar kernels on `S_d` are evaluated through the Gegenbauer addition
//! theorem. Vector kernels on `S_2` split into divergence-type and curl-type
//! parts built from `∇_x ⊗ ∇_{x'} C_k(x·x')`. Every kernel also has an explicit
//! feature expansion whose inner products reproduce it.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{
    addition_constant, gegenbauer, gegenbauer_series, harmonic_count, laplace_eigenvalue,
    sphere_volume, vector_harmonics_s2, HarmonicBasis,
};
use crate::sphere::SpherePoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothness {
    Finite(f64),
    /// Squared-exponential limit.
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternSpec {
    pub nu: Smoothness,
    pub kappa: f64,
    pub sigma2: f64,
    pub truncation: usize,
    pub dim: usize,
}

impl MaternSpec {
    pub fn new(nu: Smoothness, kappa: f64, sigma2: f64, truncation: usize, dim: usize) -> Result<Self> {
        let spec = Self {
            nu,
            kappa,
            sigma2,
            truncation,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Domain {
                function: "MaternSpec (kappa)",
                value: self.kappa,
            });
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Domain {
                function: "MaternSpec (sigma2)",
                value: self.sigma2,
            });
        }
        if let Smoothness::Finite(nu) = self.nu {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::Domain {
                    function: "MaternSpec (nu)",
                    value: nu,
                });
            }
        }
        if self.dim < 1 {
            return Err(Error::UnsupportedDimension {
                got: self.dim,
                context: "MaternSpec needs d >= 1",
            });
        }
        Ok(())
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    /// `ln Φ(λ_k)` for each degree `0..=K`.
    pub fn log_weights(&self) -> Vec<f64> {
        (0..=self.truncation)
            .map(|k| log_spectral_weight(self, laplace_eigenvalue(k, self.dim)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HodgeSpec {
    pub div: MaternSpec,
    pub curl: MaternSpec,
}

impl HodgeSpec {
    pub fn new(div: MaternSpec, curl: MaternSpec) -> Result<Self> {
        div.validate()?;
        curl.validate()?;
        if div.dim != 2 || curl.dim != 2 {
            return Err(Error::UnsupportedDimension {
                got: if div.dim != 2 { div.dim } else { curl.dim },
                context: "Hodge kernels are defined on S_2",
            });
        }
        if div.truncation != curl.truncation {
            return Err(Error::Config(format!(
                "div and curl truncations differ ({} vs {})",
                div.truncation, curl.truncation
            )));
        }
        Ok(Self { div, curl })
    }

    pub fn truncation(&self) -> usize {
        self.div.truncation
    }
}

pub fn log_spectral_weight(spec: &MaternSpec, lambda: f64) -> f64 {
    match spec.nu {
        Smoothness::Finite(nu) => {
            let a = 2.0 * nu / (spec.kappa * spec.kappa) + lambda;
            -(nu + spec.dim as f64 / 2.0) * a.ln()
        }
        Smoothness::Infinite => -spec.kappa * spec.kappa * lambda / 2.0,
    }
}

/// Partial derivatives of `ln Φ(λ)` with respect to `(ν, κ)`; `∂/∂ν` is 0 for ν = ∞.
pub fn log_spectral_weight_derivatives(spec: &MaternSpec, lambda: f64) -> (f64, f64) {
    let kappa = spec.kappa;
    match spec.nu {
        Smoothness::Finite(nu) => {
            let a = 2.0 * nu / (kappa * kappa) + lambda;
            let p = nu + spec.dim as f64 / 2.0;
            let dnu = -a.ln() - p * (2.0 / (kappa * kappa)) / a;
            let dkappa = p * (4.0 * nu / (kappa * kappa * kappa)) / a;
            (dnu, dkappa)
        }
        Smoothness::Infinite => (0.0, -kappa * lambda),
    }
}

/// `Φ(λ) = (2ν/κ² + λ)^(-ν-d/2)`, or `exp(-κ²λ/2)` for ν = ∞.
pub fn spectral_weight(spec: &MaternSpec, lambda: f64) -> f64 {
    log_spectral_weight(spec, lambda).exp()
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln C` with `C = Σ_k Φ(λ_k) N(k,d) / vol(S_d)`.
pub fn log_scalar_normalizer(spec: &MaternSpec) -> f64 {
    let vol = sphere_volume(spec.dim).ln();
    log_sum_exp(
        spec.log_weights()
            .into_iter()
            .enumerate()
            .map(|(k, lw)| lw + (harmonic_count(k, spec.dim) as f64).ln() - vol),
    )
}

/// `C = Σ_k Φ(λ_k) c_{k,d} C_k^(α)(1)`, making `k(x, x) = σ²`.
pub fn scalar_normalizer(spec: &MaternSpec) -> f64 {
    log_scalar_normalizer(spec).exp()
}

fn check_dim(spec_dim: usize, x: &SpherePoint) -> Result<()> {
    if x.dim() != spec_dim {
        return Err(Error::DimensionMismatch {
            expected: spec_dim + 1,
            got: x.dim() + 1,
        });
    }
    Ok(())
}

pub fn scalar_matern_kernel(spec: &MaternSpec, x: &SpherePoint, y: &SpherePoint) -> Result<f64> {
    check_dim(spec.dim, x)?;
    check_dim(spec.dim, y)?;
    if spec.dim < 2 {
        return Err(Error::UnsupportedDimension {
            got: spec.dim,
            context: "addition theorem needs d >= 2",
        });
    }
    let alpha = (spec.dim as f64 - 1.0) / 2.0;
    let t = x.dot(y).clamp(-1.0, 1.0);
    let series = gegenbauer_series(spec.truncation, alpha, t);
    let log_c = log_scalar_normalizer(spec);
    let sum: f64 = spec
        .log_weights()
        .iter()
        .enumerate()
        .map(|(k, lw)| (lw - log_c).exp() * addition_constant(k, spec.dim) * series[k])
        .sum();
    Ok(spec.sigma2 * sum)
}

/// `ln C^part` with `C^part = Σ_{k≥1} Φ(λ_k)(2k+1)`; the normalised kernel has `tr k(x,x) = σ²`.
pub fn log_hodge_normalizer(spec: &MaternSpec) -> f64 {
    log_sum_exp(
        spec.log_weights()
            .into_iter()
            .enumerate()
            .skip(1)
            .map(|(k, lw)| lw + ((2 * k + 1) as f64).ln()),
    )
}

pub fn hodge_normalizer(spec: &MaternSpec) -> f64 {
    log_hodge_normalizer(spec).exp()
}

fn vec3(x: &SpherePoint) -> Vector3<f64> {
    let c = x.coords();
    Vector3::new(c[0], c[1], c[2])
}

fn projector(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - x * x.transpose()
}

fn rotation(x: &Vector3<f64>) -> Matrix3<f64> {
    x.cross_matrix()
}

/// Normalised `Σ_k Φ(λ_k)/λ_k (2k+1) G_k(x, x')` without the variance factor.
fn div_structure(spec: &MaternSpec, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if spec.dim != 2 {
        return Err(Error::UnsupportedDimension {
            got: spec.dim,
            context: "Hodge kernels are defined on S_2",
        });
    }
    let t = x.dot(y).clamp(-1.0, 1.0);
    let px = projector(x);
    let py = projector(y);
    let rank_one = (px * y) * (py * x).transpose();
    let pxy = px * py;
    let log_c = log_hodge_normalizer(spec);
    let mut out = Matrix3::zeros();
    if spec.truncation == 0 {
        return Ok(out);
    }
    for (k, lw) in spec.log_weights().into_iter().enumerate().skip(1) {
        let (_, d1, d2) = gegenbauer(k, 0.5, t)?;
        let w = (lw - log_c).exp() / laplace_eigenvalue(k, 2) * (2 * k + 1) as f64;
        out += (rank_one * d2 + pxy * d1) * w;
    }
    Ok(out)
}

fn to_dmatrix(m: Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

pub fn hodge_div_kernel(spec: &MaternSpec, x: &SpherePoint, y: &SpherePoint) -> Result<DMatrix<f64>> {
    check_dim(2, x)?;
    check_dim(2, y)?;
    let g = div_structure(spec, &vec3(x), &vec3(y))?;
    Ok(to_dmatrix(g * spec.sigma2))
}

pub fn hodge_curl_kernel(spec: &MaternSpec, x: &SpherePoint, y: &SpherePoint) -> Result<DMatrix<f64>> {
    check_dim(2, x)?;
    check_dim(2, y)?;
    let (xv, yv) = (vec3(x), vec3(y));
    let g = div_structure(spec, &xv, &yv)?;
    Ok(to_dmatrix(rotation(&xv) * g * rotation(&yv).transpose() * spec.sigma2))
}

pub fn hodge_compositional_kernel(spec: &HodgeSpec, x: &SpherePoint, y: &SpherePoint) -> Result<DMatrix<f64>> {
    Ok(hodge_div_kernel(&spec.div, x, y)? + hodge_curl_kernel(&spec.curl, x, y)?)
}

/// Scaled orthonormal harmonics `√(σ²Φ(λ_k)/C) φ_m(x)` for basis indices in `range`,
/// in the degree-major order of [`HarmonicBasis`].
pub fn scalar_feature_map(spec: &MaternSpec, x: &SpherePoint, range: Range<usize>) -> Result<DVector<f64>> {
    check_dim(spec.dim, x)?;
    let basis = HarmonicBasis::new(spec.dim, spec.truncation)?;
    if range.start > range.end || range.end > basis.len() {
        return Err(Error::Index {
            start: range.start,
            end: range.end,
            len: basis.len(),
        });
    }
    let values = basis.eval(x.coords().as_slice());
    let log_c = log_scalar_normalizer(spec);
    let lw = spec.log_weights();
    Ok(DVector::from_iterator(
        range.len(),
        range.map(|m| (spec.sigma2 * (lw[basis.degree(m)] - log_c).exp()).sqrt() * values[m]),
    ))
}

/// Scaled div-type then curl-type eigenfields as columns of a `3 × |range|` matrix.
pub fn vector_feature_map(spec: &HodgeSpec, x: &SpherePoint, range: Range<usize>) -> Result<DMatrix<f64>> {
    check_dim(2, x)?;
    let kmax = spec.truncation();
    let (div, curl) = vector_harmonics_s2(x, kmax)?;
    let per_kind = div.len();
    if range.start > range.end || range.end > 2 * per_kind {
        return Err(Error::Index {
            start: range.start,
            end: range.end,
            len: 2 * per_kind,
        });
    }
    // eigenfield sums carry the 1/vol(S_2) of the addition theorem
    let vol = sphere_volume(2);
    let scales = |s: &MaternSpec| -> Vec<f64> {
        let log_c = log_hodge_normalizer(s);
        let lw = s.log_weights();
        (1..=kmax)
            .flat_map(|k| {
                let v = (s.sigma2 * vol * (lw[k] - log_c).exp()).sqrt();
                std::iter::repeat_n(v, 2 * k + 1)
            })
            .collect()
    };
    let (sd, sc) = (scales(&spec.div), scales(&spec.curl));
    let mut out = DMatrix::zeros(3, range.len());
    for (col, m) in range.enumerate() {
        let v = if m < per_kind {
            &div[m] * sd[m]
        } else {
            &curl[m - per_kind] * sc[m - per_kind]
        };
        out.set_column(col, &v);
    }
    Ok(out)
}
