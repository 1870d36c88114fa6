//! Gaussian vector field priors on spheres.
//!
//! Three constructions are supported: projecting a stack of independent scalar
//! GPs onto the tangent space, expanding independent scalar GPs in a
//! coordinate frame, and the Hodge-compositional Matérn field on `S_2`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::kernels::{hodge_compositional_kernel, scalar_matern_kernel, HodgeSpec, MaternSpec};
use crate::sphere::{SpherePoint, TangentVector};

/// Distance to the polar axis below which the spherical frame is rejected.
pub const POLE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GvfKind {
    Projected,
    Frame,
    Hodge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GvfPrior {
    /// `P_x (f_1, …, f_{d+1})` for independent scalar GPs `f_i`.
    Projected { components: Vec<MaternSpec> },
    /// `Σ_i f_i(x) e_i(x)` in the spherical frame of `S_2`.
    CoordinateFrame { components: Vec<MaternSpec> },
    Hodge(HodgeSpec),
}

impl GvfPrior {
    /// Projected field with `d+1` identically specified components.
    pub fn projected(spec: MaternSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dim < 2 {
            return Err(Error::UnsupportedDimension {
                got: spec.dim,
                context: "projected fields need d >= 2",
            });
        }
        Ok(Self::Projected {
            components: vec![spec; spec.dim + 1],
        })
    }

    pub fn frame(spec: MaternSpec) -> Result<Self> {
        spec.validate()?;
        if spec.dim != 2 {
            return Err(Error::UnsupportedDimension {
                got: spec.dim,
                context: "coordinate-frame fields are defined on S_2",
            });
        }
        Ok(Self::CoordinateFrame {
            components: vec![spec; 2],
        })
    }

    pub fn hodge(spec: HodgeSpec) -> Self {
        Self::Hodge(spec)
    }

    pub fn kind(&self) -> GvfKind {
        match self {
            Self::Projected { .. } => GvfKind::Projected,
            Self::CoordinateFrame { .. } => GvfKind::Frame,
            Self::Hodge(_) => GvfKind::Hodge,
        }
    }

    /// Sphere dimension `d`.
    pub fn dim(&self) -> usize {
        self.components()[0].dim
    }

    /// Specs of the independent parts, in feature-group order.
    pub fn components(&self) -> Vec<MaternSpec> {
        match self {
            Self::Projected { components } | Self::CoordinateFrame { components } => components.clone(),
            Self::Hodge(h) => vec![h.div, h.curl],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let comps = self.components();
        for c in &comps {
            c.validate()?;
        }
        let d = comps[0].dim;
        let k = comps[0].truncation;
        if comps.iter().any(|c| c.dim != d || c.truncation != k) {
            return Err(Error::Config("GVF components must share dimension and truncation".into()));
        }
        match self {
            Self::Projected { components } if components.len() != d + 1 => Err(Error::DimensionMismatch {
                expected: d + 1,
                got: components.len(),
            }),
            Self::CoordinateFrame { components } if d != 2 || components.len() != 2 => {
                Err(Error::UnsupportedDimension {
                    got: d,
                    context: "coordinate-frame fields are defined on S_2 with two components",
                })
            }
            Self::Hodge(h) => HodgeSpec::new(h.div, h.curl).map(|_| ()),
            _ => Ok(()),
        }
    }

    pub(crate) fn bank(&self) -> Result<FeatureBank> {
        self.validate()?;
        let k = self.components()[0].truncation;
        match self {
            Self::Projected { .. } => FeatureBank::projected(self.dim(), k),
            Self::CoordinateFrame { .. } => FeatureBank::frame(k),
            Self::Hodge(_) => FeatureBank::hodge(k),
        }
    }
}

fn projector(x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::identity(x.len(), x.len()) - x * x.transpose()
}

/// Prior covariance `k(x, x')` as a `(d+1) × (d+1)` matrix with tangent rows and columns.
pub fn gvf_cov(prior: &GvfPrior, x: &SpherePoint, y: &SpherePoint) -> Result<DMatrix<f64>> {
    prior.validate()?;
    let d = prior.dim();
    for p in [x, y] {
        if p.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d + 1,
                got: p.dim() + 1,
            });
        }
    }
    match prior {
        GvfPrior::Projected { components } => {
            let diag = DVector::from_iterator(
                d + 1,
                components.iter().map(|c| scalar_matern_kernel(c, x, y)).collect::<Result<Vec<_>>>()?,
            );
            Ok(projector(x.coords()) * DMatrix::from_diagonal(&diag) * projector(y.coords()))
        }
        GvfPrior::CoordinateFrame { components } => {
            let (ex1, ex2) = default_frame_s2(x)?;
            let (ey1, ey2) = default_frame_s2(y)?;
            let k1 = scalar_matern_kernel(&components[0], x, y)?;
            let k2 = scalar_matern_kernel(&components[1], x, y)?;
            Ok(&ex1 * ey1.transpose() * k1 + &ex2 * ey2.transpose() * k2)
        }
        GvfPrior::Hodge(h) => hodge_compositional_kernel(h, x, y),
    }
}

/// Unit colatitude and longitude directions `(∂θ̂, ∂φ̂)` at `x ∈ S_2`.
pub fn default_frame_s2(x: &SpherePoint) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            got: x.dim(),
            context: "the spherical frame is defined on S_2",
        });
    }
    let (e, _) = frame_with_jacobian(x.coords().as_slice())?;
    Ok((DVector::from_column_slice(&e[0]), DVector::from_column_slice(&e[1])))
}

/// Frame vectors and their ambient Jacobians `jac[i][b][a] = ∂e_i[b]/∂x_a`.
pub(crate) fn frame_with_jacobian(x: &[f64]) -> Result<([[f64; 3]; 2], [[[f64; 3]; 3]; 2])> {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let rho = (x1 * x1 + x2 * x2).sqrt();
    if rho < POLE_TOLERANCE {
        return Err(Error::PoleSingularity(rho));
    }
    let r3 = rho * rho * rho;
    let e_theta = [x3 * x1 / rho, x3 * x2 / rho, -rho];
    let e_phi = [-x2 / rho, x1 / rho, 0.0];
    let j_theta = [
        [x3 * (1.0 / rho - x1 * x1 / r3), -x3 * x1 * x2 / r3, x1 / rho],
        [-x3 * x1 * x2 / r3, x3 * (1.0 / rho - x2 * x2 / r3), x2 / rho],
        [-x1 / rho, -x2 / rho, 0.0],
    ];
    let j_phi = [
        [x2 * x1 / r3, -1.0 / rho + x2 * x2 / r3, 0.0],
        [1.0 / rho - x1 * x1 / r3, -x1 * x2 / r3, 0.0],
        [0.0, 0.0, 0.0],
    ];
    Ok(([e_theta, e_phi], [j_theta, j_phi]))
}

/// A prior draw `x ↦ Σ_m w_m ψ_m(x)` over the explicit feature columns.
#[derive(Debug, Clone)]
pub struct PriorFunctionSample {
    bank: FeatureBank,
    weighted: DVector<f64>,
}

impl PriorFunctionSample {
    pub fn eval(&self, x: &SpherePoint) -> Result<TangentVector> {
        let raw = self.bank.eval(x.coords().as_slice(), false)?;
        let v = raw.apply(self.weighted.as_slice());
        TangentVector::new(x.clone(), DVector::from_vec(v))
    }

    pub fn weights_len(&self) -> usize {
        self.weighted.len()
    }
}

/// Draws standard normal feature weights from `seed`.
pub fn gvf_prior_function_sample(prior: &GvfPrior, seed: u64) -> Result<PriorFunctionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = prior.bank()?;
    let w: Vec<f64> = (0..bank.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    prior_function_from_weights(prior, &w)
}

/// Prior draw with caller-supplied standard-normal weights.
pub fn prior_function_from_weights(prior: &GvfPrior, weights: &[f64]) -> Result<PriorFunctionSample> {
    let bank = prior.bank()?;
    if weights.len() != bank.len() {
        return Err(Error::DimensionMismatch {
            expected: bank.len(),
            got: weights.len(),
        });
    }
    let scales = bank.scales(&prior.components());
    let weighted = DVector::from_iterator(bank.len(), weights.iter().zip(&scales.s).map(|(w, s)| w * s));
    Ok(PriorFunctionSample { bank, weighted })
}
