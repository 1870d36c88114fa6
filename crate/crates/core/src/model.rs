//! Residual deep Gaussian process: a stack of vector-field layers composed
//! through the exponential map, followed by a scalar or vector head.
//!
//! Hidden layers are sampled pointwise with explicit standard-normal noise;
//! the head is integrated analytically against the Gaussian likelihood.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RawFeatures;
use crate::gvf::{GvfKind, GvfPrior};
use crate::kernels::{HodgeSpec, MaternSpec, Smoothness};
use crate::params::{ParamBuilder, ParameterStore, Transform};
use crate::sphere::{exp_map, spherical_kmeans, tangent_basis, SpherePoint, TangentVector};
use crate::variational::{
    FamilyState, IlState, IvState, Layer, LayerFunction, LayerGrad, LayerOptions, LayerPrior, Moments, Prepared,
    SampleTape, VariationalLayer,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    /// Interdomain inducing variables on the prior's own features.
    Iv,
    /// Inducing values at fixed locations.
    Il,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Scalar,
    Vector,
}

/// Architecture and initialisation of a [`ResidualDeepGP`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    /// Number of layers including the head.
    pub depth: usize,
    pub hidden_kind: GvfKind,
    pub family: FamilyKind,
    /// Kernel truncation of hidden layers; `None` picks a family-dependent default.
    pub hidden_truncation: Option<usize>,
    pub head: HeadKind,
    /// Field kind of a vector head.
    pub head_kind: GvfKind,
    pub head_truncation: Option<usize>,
    /// Interdomain variational truncation; `None` uses the full kernel truncation.
    pub var_truncation: Option<usize>,
    /// Train the diagonal `D'` above the variational truncation.
    pub tail_extension: bool,
    pub num_inducing: usize,
    pub nu: f64,
    pub train_nu: bool,
    pub kappa: f64,
    pub head_variance: f64,
    /// Hidden-layer prior variance; `None` gives `1e-4 / (depth - 1)`.
    pub hidden_variance: Option<f64>,
    pub noise_variance: f64,
    pub train_noise: bool,
    pub kmeans_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            depth: 2,
            hidden_kind: GvfKind::Hodge,
            family: FamilyKind::Iv,
            hidden_truncation: None,
            head: HeadKind::Scalar,
            head_kind: GvfKind::Hodge,
            head_truncation: None,
            var_truncation: None,
            tail_extension: false,
            num_inducing: 30,
            nu: 1.5,
            train_nu: true,
            kappa: 1.0,
            head_variance: 1.0,
            hidden_variance: None,
            noise_variance: 0.01,
            train_noise: true,
            kmeans_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden_truncation(&self) -> usize {
        self.hidden_truncation.unwrap_or(match (self.family, self.hidden_kind) {
            (FamilyKind::Iv, GvfKind::Hodge) => 5,
            (FamilyKind::Iv, _) => 6,
            (FamilyKind::Il, _) => 9,
        })
    }

    pub fn head_truncation(&self) -> usize {
        self.head_truncation.unwrap_or(match (self.family, self.head) {
            (FamilyKind::Iv, HeadKind::Scalar) => 6,
            (FamilyKind::Iv, HeadKind::Vector) => 5,
            (FamilyKind::Il, _) => 9,
        })
    }

    pub fn hidden_variance(&self) -> f64 {
        self.hidden_variance
            .unwrap_or(if self.depth > 1 { 1e-4 / (self.depth - 1) as f64 } else { 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Config(format!("noise variance must be positive, got {}", self.noise_variance)));
        }
        let s2_only = |k: GvfKind| matches!(k, GvfKind::Frame | GvfKind::Hodge);
        let needs_s2 = (self.depth > 1 && s2_only(self.hidden_kind)) || (self.head == HeadKind::Vector && s2_only(self.head_kind));
        if needs_s2 && self.dim != 2 {
            return Err(Error::UnsupportedDimension {
                got: self.dim,
                context: "frame and Hodge fields",
            });
        }
        if self.family == FamilyKind::Il && self.num_inducing == 0 {
            return Err(Error::Config("num_inducing must be positive".into()));
        }
        if !(self.nu >= crate::variational::NU_FLOOR) {
            return Err(Error::Config(format!("smoothness {} below the floor", self.nu)));
        }
        Ok(())
    }

    fn spec(&self, sigma2: f64, truncation: usize) -> Result<MaternSpec> {
        MaternSpec::new(Smoothness::Finite(self.nu), self.kappa, sigma2, truncation, self.dim)
    }

    fn field_prior(&self, kind: GvfKind, sigma2: f64, truncation: usize) -> Result<GvfPrior> {
        let spec = self.spec(sigma2, truncation)?;
        match kind {
            GvfKind::Projected => GvfPrior::projected(spec),
            GvfKind::Frame => GvfPrior::frame(spec),
            GvfKind::Hodge => Ok(GvfPrior::hodge(HodgeSpec::new(spec, spec)?)),
        }
    }

    pub fn hidden_prior(&self) -> Result<LayerPrior> {
        Ok(LayerPrior::Gvf(self.field_prior(
            self.hidden_kind,
            self.hidden_variance(),
            self.hidden_truncation(),
        )?))
    }

    pub fn head_prior(&self) -> Result<LayerPrior> {
        Ok(match self.head {
            HeadKind::Scalar => LayerPrior::Scalar(self.spec(self.head_variance, self.head_truncation())?),
            HeadKind::Vector => LayerPrior::Gvf(self.field_prior(self.head_kind, self.head_variance, self.head_truncation())?),
        })
    }

    fn initial_state(&self, prior: &LayerPrior, z: &[SpherePoint]) -> Result<FamilyState> {
        Ok(match self.family {
            FamilyKind::Iv => FamilyState::Iv(IvState::whitened_identity(
                prior,
                self.var_truncation.unwrap_or(prior.truncation()).min(prior.truncation()),
                self.tail_extension,
            )?),
            FamilyKind::Il => FamilyState::Il(IlState::whitened_identity(z.to_vec(), prior)),
        })
    }
}

/// Observations: scalars, or ambient tangent vectors at each input.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Scalar(Vec<f64>),
    Vector(Vec<DVector<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Self::Scalar(v) => v.len(),
            Self::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Self::Scalar(v) => Self::Scalar(idx.iter().map(|&i| v[i]).collect()),
            Self::Vector(v) => Self::Vector(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<SpherePoint>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Vec<SpherePoint>, targets: Targets) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: self.targets.select(idx),
        }
    }
}

/// First-layer features at the data inputs, plus sufficient statistics for the
/// single-layer scalar interdomain case.
pub struct DataCache {
    data: Dataset,
    first: Vec<RawFeatures>,
    gram: Option<FastGram>,
}

impl DataCache {
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

struct FastGram {
    g: DMatrix<f64>,
    r: DVector<f64>,
    yy: f64,
}

/// Per-sample head moments at each test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl PointPrediction {
    pub fn mixture_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.means[0].len());
        for mu in &self.means {
            m += mu;
        }
        m / self.means.len() as f64
    }

    /// Average Frobenius norm of the per-sample head covariance.
    pub fn uncertainty(&self) -> f64 {
        self.covs.iter().map(|c| c.norm()).sum::<f64>() / self.covs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub samples: usize,
    pub points: Vec<PointPrediction>,
}

impl Prediction {
    pub fn uncertainty(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.uncertainty()).collect()
    }

    pub fn mixture_means(&self) -> Vec<DVector<f64>> {
        self.points.iter().map(|p| p.mixture_mean()).collect()
    }
}

/// One forward pass at one input: the hidden trajectory and the head moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub states: Vec<SpherePoint>,
    pub head: Moments,
}

/// Trainability flags for [`ResidualDeepGP::from_layers`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainFlags {
    pub hyper: bool,
    pub nu: bool,
    pub noise: bool,
    pub variational: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            hyper: true,
            nu: true,
            noise: true,
            variational: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualDeepGP {
    layers: Vec<Layer>,
    store: ParameterStore,
    theta: Vec<f64>,
    noise_slot: usize,
}

/// Number of standard normals for hidden-layer noise streams; bounds on sample and layer indices.
const MAX_SAMPLES: usize = 1 << 12;
const MAX_LAYERS: usize = 1 << 8;

/// Common-random-number noise for data index `i`, sample `s`, layer `l`.
pub(crate) fn point_noise(seed: u64, i: usize, s: usize, l: usize, n: usize) -> Vec<f64> {
    debug_assert!(s < MAX_SAMPLES && l < MAX_LAYERS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((i as u64) << 20) | ((s as u64) << 8) | l as u64);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn sinc(n: f64) -> f64 {
    if n < 1e-4 {
        1.0 - n * n / 6.0
    } else {
        n.sin() / n
    }
}

/// `(d/dn)(sin n / n) / n`.
fn sinc_slope(n: f64) -> f64 {
    if n < 1e-3 {
        let n2 = n * n;
        -1.0 / 3.0 + n2 / 30.0 - n2 * n2 / 840.0
    } else {
        (n * n.cos() - n.sin()) / (n * n * n)
    }
}

/// `cos(|g|) x + sin(|g|)/|g| g` without renormalisation.
fn exp_forward(x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = g.norm();
    x * n.cos() + g * sinc(n)
}

fn exp_backward(x: &DVector<f64>, g: &DVector<f64>, ybar: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = g.norm();
    let xbar = ybar * n.cos();
    let coef = -sinc(n) * x.dot(ybar) + sinc_slope(n) * g.dot(ybar);
    let gbar = ybar * sinc(n) + g * coef;
    (xbar, gbar)
}

struct LogLik {
    value: f64,
    mean_bar: DVector<f64>,
    cov_bar: DMatrix<f64>,
    noise_bar: f64,
}

/// Expected Gaussian log-likelihood under the head's Gaussian.
fn expected_loglik(target: TargetRef<'_>, x0: &DVector<f64>, m: &Moments, s2: f64) -> LogLik {
    match target {
        TargetRef::Scalar(y) => {
            let r = y - m.mean[0];
            let q = r * r + m.cov[(0, 0)];
            LogLik {
                value: -0.5 * (LN_2PI + s2.ln()) - q / (2.0 * s2),
                mean_bar: DVector::from_element(1, r / s2),
                cov_bar: DMatrix::from_element(1, 1, -0.5 / s2),
                noise_bar: -0.5 / s2 + q / (2.0 * s2 * s2),
            }
        }
        TargetRef::Vector(y) => {
            let dim = x0.len();
            let d = (dim - 1) as f64;
            let p = DMatrix::identity(dim, dim) - x0 * x0.transpose();
            let r = y - &m.mean;
            let pr = &p * &r;
            let q = r.dot(&pr) + (&p * &m.cov).trace();
            LogLik {
                value: -0.5 * d * (LN_2PI + s2.ln()) - q / (2.0 * s2),
                mean_bar: pr / s2,
                cov_bar: p * (-0.5 / s2),
                noise_bar: -0.5 * d / s2 + q / (2.0 * s2 * s2),
            }
        }
    }
}

#[derive(Clone, Copy)]
enum TargetRef<'a> {
    Scalar(f64),
    Vector(&'a DVector<f64>),
}

fn target_at(t: &Targets, i: usize) -> TargetRef<'_> {
    match t {
        Targets::Scalar(v) => TargetRef::Scalar(v[i]),
        Targets::Vector(v) => TargetRef::Vector(&v[i]),
    }
}

/// Log density of the predictive Gaussian for one sample, in a tangent basis for vector targets.
fn predictive_log_density(target: TargetRef<'_>, x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>, s2: f64) -> Result<f64> {
    match target {
        TargetRef::Scalar(y) => {
            let v = cov[(0, 0)].max(0.0) + s2;
            Ok(-0.5 * (LN_2PI + v.ln() + (y - mean[0]).powi(2) / v))
        }
        TargetRef::Vector(y) => {
            let b = tangent_basis(x);
            let d = b.ncols();
            let r = b.transpose() * (y - mean);
            let mut c = b.transpose() * cov * &b;
            c = (&c + c.transpose()) * 0.5;
            for i in 0..d {
                c[(i, i)] += s2;
            }
            let chol = c.cholesky().ok_or(Error::Cholesky {
                context: "predictive covariance",
                jitter: 0.0,
            })?;
            let l = chol.l();
            let z = l.solve_lower_triangular(&r).expect("nonsingular factor");
            let logdet: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            Ok(-0.5 * (d as f64 * LN_2PI + logdet + z.norm_squared()))
        }
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

impl ResidualDeepGP {
    /// Builds a model per `config`; inducing locations come from k-means on `inputs`.
    pub fn new(config: &ModelConfig, inputs: &[SpherePoint]) -> Result<Self> {
        config.validate()?;
        let z = if config.family == FamilyKind::Il {
            if inputs.is_empty() {
                return Err(Error::InvalidCount("inducing locations need training inputs".into()));
            }
            spherical_kmeans(inputs, config.num_inducing.min(inputs.len()), 100, config.kmeans_seed)?
        } else {
            Vec::new()
        };
        let mut hidden = Vec::new();
        for _ in 1..config.depth {
            let prior = config.hidden_prior()?;
            let state = config.initial_state(&prior, &z)?;
            hidden.push(VariationalLayer::new(prior, state)?);
        }
        let head_prior = config.head_prior()?;
        let head_state = config.initial_state(&head_prior, &z)?;
        let head = VariationalLayer::new(head_prior, head_state)?;
        Self::from_layers(
            hidden,
            head,
            config.noise_variance,
            TrainFlags {
                nu: config.train_nu,
                noise: config.train_noise,
                ..TrainFlags::default()
            },
        )
    }

    pub fn from_layers(hidden: Vec<VariationalLayer>, head: VariationalLayer, noise_variance: f64, flags: TrainFlags) -> Result<Self> {
        if hidden.len() + 1 > MAX_LAYERS {
            return Err(Error::Config("too many layers".into()));
        }
        let dim = head.prior.dim();
        let mut b = ParamBuilder::default();
        let mut layers = Vec::new();
        let options = LayerOptions {
            train_hyper: flags.hyper,
            train_nu: flags.nu,
            train_variational: flags.variational,
        };
        for (l, h) in hidden.iter().enumerate() {
            if !matches!(h.prior, LayerPrior::Gvf(_)) {
                return Err(Error::Config("hidden layers must be vector fields".into()));
            }
            if h.prior.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: h.prior.dim() });
            }
            layers.push(Layer::build(h, &format!("layer{l}"), options, &mut b)?);
        }
        layers.push(Layer::build(&head, "head", options, &mut b)?);
        if !(noise_variance > 0.0) {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        let noise_slot = b.push("noise_variance", &[noise_variance], Transform::Softplus { floor: 0.0 }, flags.noise);
        let store = ParameterStore::from_constrained(b.entries, &b.values)?;
        let theta = store.constrained();
        Ok(Self {
            layers,
            store,
            theta,
            noise_slot,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.head().prior.dim()
    }

    pub fn parameters(&self) -> &ParameterStore {
        &self.store
    }

    /// Replaces the unconstrained parameter vector.
    pub fn set_unconstrained(&mut self, u: Vec<f64>) -> Result<()> {
        if u.len() != self.store.len() {
            return Err(Error::DimensionMismatch {
                expected: self.store.len(),
                got: u.len(),
            });
        }
        self.store.unconstrained = u;
        self.theta = self.store.constrained();
        Ok(())
    }

    pub fn constrained(&self) -> &[f64] {
        &self.theta
    }

    pub fn noise_variance(&self) -> f64 {
        self.theta[self.noise_slot]
    }

    pub fn hidden_layers(&self) -> Vec<VariationalLayer> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.to_variational(&self.theta))
            .collect()
    }

    pub fn head(&self) -> VariationalLayer {
        self.layers.last().expect("head layer").to_variational(&self.theta)
    }

    fn head_layer(&self) -> &Layer {
        self.layers.last().expect("head layer")
    }

    pub fn is_vector_head(&self) -> bool {
        self.head_layer().is_field()
    }

    /// Standard normals consumed per point by hidden layer `l`.
    pub fn hidden_noise_len(&self, l: usize) -> usize {
        self.layers[l].noise_len()
    }

    fn prepare(&self) -> Result<Vec<Prepared>> {
        self.layers.iter().map(|l| l.prepare(&self.theta)).collect()
    }

    /// Sets the variational distribution of a single-block interdomain scalar
    /// model to its closed-form optimum for the current hyperparameters.
    /// Returns `false`, changing nothing, for models without a closed form.
    pub fn set_optimal_head(&mut self, cache: &DataCache) -> Result<bool> {
        let (Some(fg), true) = (cache.gram.as_ref(), self.fast_path_eligible()) else {
            return Ok(false);
        };
        let preps = self.prepare()?;
        let s = &preps[0].scales.s;
        let s2 = self.noise_variance();
        let m = s.len();
        // q(w) = N(P⁻¹ D r / σ², P⁻¹) with P = I + D G D / σ²
        let mut p = DMatrix::from_fn(m, m, |i, j| fg.g[(i, j)] * s[i] * s[j] / s2);
        for i in 0..m {
            p[(i, i)] += 1.0;
        }
        let chol = p.cholesky().ok_or(Error::Cholesky {
            context: "optimal head precision",
            jitter: 0.0,
        })?;
        let mean = chol.solve(&DVector::from_fn(m, |i, _| s[i] * fg.r[i] / s2));
        let mut cov = chol.inverse();
        cov = (&cov + cov.transpose()) * 0.5;
        let factor = cov.cholesky().ok_or(Error::Cholesky {
            context: "optimal head covariance",
            jitter: 0.0,
        })?;
        let mut u = self.store.unconstrained.clone();
        for (name, values) in [
            ("head.block0.mean", mean.as_slice().to_vec()),
            ("head.block0.factor", crate::variational::pack_lower(&factor.l())),
        ] {
            let e = self
                .store
                .entry(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            e.transform.inverse(&values, &mut u[e.offset..e.offset + e.len])?;
        }
        self.set_unconstrained(u)?;
        Ok(true)
    }

    fn fast_path_eligible(&self) -> bool {
        self.layers.len() == 1 && !self.is_vector_head() && self.layers[0].is_single_block_iv()
    }

    pub fn cache(&self, data: &Dataset) -> Result<DataCache> {
        match (&data.targets, self.is_vector_head()) {
            (Targets::Scalar(_), false) | (Targets::Vector(_), true) => {}
            _ => return Err(Error::Config("target type does not match the model head".into())),
        }
        if let Targets::Vector(v) = &data.targets {
            for t in v {
                if t.len() != self.dim() + 1 {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim() + 1,
                        got: t.len(),
                    });
                }
            }
        }
        let first = data
            .inputs
            .iter()
            .map(|x| {
                if x.dim() != self.dim() {
                    return Err(Error::DimensionMismatch { expected: self.dim(), got: x.dim() });
                }
                self.layers[0].bank.eval(x.coords().as_slice(), false)
            })
            .collect::<Result<Vec<_>>>()?;
        let gram = if self.fast_path_eligible() {
            let Targets::Scalar(ys) = &data.targets else { unreachable!() };
            let m = self.layers[0].bank.len();
            let mut g = DMatrix::zeros(m, m);
            let mut r = DVector::zeros(m);
            for (raw, y) in first.iter().zip(ys) {
                let b = DVector::from_column_slice(&raw.val);
                g.syger(1.0, &b, &b, 1.0);
                r.axpy(*y, &b, 1.0);
            }
            g.fill_upper_triangle_with_lower_triangle();
            Some(FastGram {
                g,
                r,
                yy: ys.iter().map(|y| y * y).sum(),
            })
        } else {
            None
        };
        Ok(DataCache {
            data: data.clone(),
            first,
            gram,
        })
    }

    /// ELBO estimate on `data` with all points as the batch.
    pub fn elbo(&self, data: &Dataset, samples: usize, seed: u64) -> Result<f64> {
        let cache = self.cache(data)?;
        self.elbo_cached(&cache, None, cache.len(), samples, seed)
    }

    pub fn elbo_cached(&self, cache: &DataCache, batch: Option<&[usize]>, n_total: usize, samples: usize, seed: u64) -> Result<f64> {
        Ok(self.evaluate(cache, batch, n_total, samples, seed, false)?.0)
    }

    /// ELBO and its gradient with respect to the unconstrained parameters.
    pub fn elbo_and_gradient(&self, cache: &DataCache, batch: Option<&[usize]>, n_total: usize, samples: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.evaluate(cache, batch, n_total, samples, seed, true)?;
        let g = self.store.chain_gradient(&g.expect("gradient requested"));
        for (i, x) in g.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    detail: format!("parameter {} (index {i})", self.store.name_of(i)),
                });
            }
        }
        Ok((v, g))
    }

    /// ELBO and its gradient with respect to the constrained parameters.
    pub(crate) fn evaluate(
        &self,
        cache: &DataCache,
        batch: Option<&[usize]>,
        n_total: usize,
        samples: usize,
        seed: u64,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        if samples == 0 || samples > MAX_SAMPLES {
            return Err(Error::InvalidCount(format!("sample count {samples} outside 1..={MAX_SAMPLES}")));
        }
        let mut idx: Vec<usize> = match batch {
            Some(b) => b.to_vec(),
            None => (0..cache.len()).collect(),
        };
        idx.sort_unstable();
        if let Some(&last) = idx.last() {
            if last >= cache.len() {
                return Err(Error::Index {
                    start: last,
                    end: last + 1,
                    len: cache.len(),
                });
            }
        }
        let preps = self.prepare()?;
        let mut grads: Vec<LayerGrad> = self.layers.iter().zip(&preps).map(|(l, p)| l.zero_grad(p)).collect();
        let mut noise_bar = 0.0;
        let full = idx.len() == cache.len();
        let mut lik = 0.0;
        if full && cache.gram.is_some() && !idx.is_empty() {
            lik = self.fast_likelihood(cache, &preps[0], with_grad.then_some(&mut grads[0]), &mut noise_bar);
            lik *= n_total as f64 / idx.len() as f64;
            if with_grad {
                let scale = n_total as f64 / idx.len() as f64;
                grads[0].scale(scale);
                noise_bar *= scale;
            }
        } else if !idx.is_empty() {
            let weight = n_total as f64 / (idx.len() as f64 * samples as f64);
            for &i in &idx {
                let mut acc = 0.0;
                for s in 0..samples {
                    acc += self.point_pass(cache, &preps, i, s, seed, with_grad.then_some((&mut grads, &mut noise_bar)), weight)?;
                }
                lik += acc * weight;
            }
        }
        let mut kl = 0.0;
        for ((layer, prep), grad) in self.layers.iter().zip(&preps).zip(grads.iter_mut()) {
            kl += layer.kl(prep);
            if with_grad {
                layer.kl_backward(prep, -1.0, grad);
            }
        }
        let value = lik - kl;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "ELBO".into(),
                detail: format!("likelihood {lik}, KL {kl}"),
            });
        }
        let grad = if with_grad {
            let mut out = vec![0.0; self.theta.len()];
            for ((layer, prep), g) in self.layers.iter().zip(&preps).zip(grads) {
                layer.finalize(prep, g, &mut out);
            }
            out[self.noise_slot] += noise_bar;
            Some(out)
        } else {
            None
        };
        Ok((value, grad))
    }

    /// Full-batch likelihood term of a single scalar interdomain layer from cached statistics.
    fn fast_likelihood(&self, cache: &DataCache, prep: &Prepared, grad: Option<&mut LayerGrad>, noise_bar: &mut f64) -> f64 {
        let fg = cache.gram.as_ref().expect("fast statistics");
        let layer = &self.layers[0];
        let (m, l) = layer.single_block(prep);
        let s = DVector::from_column_slice(&prep.scales.s);
        let n = cache.len() as f64;
        let s2 = self.noise_variance();
        let dm = m.component_mul(&s);
        let gdm = &fg.g * &dm;
        let dl = DMatrix::from_fn(l.nrows(), l.ncols(), |i, j| l[(i, j)] * s[i]);
        let gdl = &fg.g * &dl;
        let q = fg.yy - 2.0 * dm.dot(&fg.r) + dm.dot(&gdm) + dl.component_mul(&gdl).sum();
        let value = -0.5 * n * (LN_2PI + s2.ln()) - q / (2.0 * s2);
        *noise_bar += -0.5 * n / s2 + q / (2.0 * s2 * s2);
        if let Some(grad) = grad {
            let c = -1.0 / (2.0 * s2);
            // ∂q/∂m = 2 D(G D m − r), ∂q/∂L = 2 D G D L
            let gm = (&gdm - &fg.r).component_mul(&s) * (2.0 * c);
            let gl = DMatrix::from_fn(l.nrows(), l.ncols(), |i, j| 2.0 * c * s[i] * gdl[(i, j)]);
            // ∂q/∂s_c = 2 m_c ((G D m)_c − r_c) + 2 (G D S)_cc with S = L Lᵀ
            let gs = DVector::from_fn(s.len(), |i, _| {
                let diag: f64 = (0..l.ncols()).map(|j| gdl[(i, j)] * l[(i, j)]).sum();
                2.0 * c * (m[i] * (gdm[i] - fg.r[i]) + diag)
            });
            layer.add_single_block_grad(grad, &gm, &gl, gs.as_slice());
        }
        value
    }

    /// Forward and optional backward pass for data point `i`, sample `s`. Returns the expected log-likelihood.
    fn point_pass(
        &self,
        cache: &DataCache,
        preps: &[Prepared],
        i: usize,
        s: usize,
        seed: u64,
        grad: Option<(&mut Vec<LayerGrad>, &mut f64)>,
        weight: f64,
    ) -> Result<f64> {
        let nl = self.layers.len();
        let with_grad = grad.is_some();
        let x0 = cache.data.inputs[i].coords();
        let mut xs: Vec<DVector<f64>> = vec![x0.clone()];
        let mut raws: Vec<Option<RawFeatures>> = Vec::with_capacity(nl);
        let mut fs: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        let mut tapes: Vec<(DVector<f64>, SampleTape)> = Vec::with_capacity(nl);
        for l in 0..nl - 1 {
            let layer = &self.layers[l];
            let x = &xs[l];
            let raw = if l == 0 { None } else { Some(layer.bank.eval(x.as_slice(), with_grad)?) };
            let f = layer.scaled(raw.as_ref().unwrap_or(&cache.first[i]), &preps[l]);
            let eps = point_noise(seed, i, s, l, layer.noise_len());
            let (g, tape) = layer.sample(&f, x, &preps[l], &eps)?;
            let next = exp_forward(x, &g);
            raws.push(raw);
            fs.push(f);
            tapes.push((g, tape));
            xs.push(next);
        }
        let head = self.head_layer();
        let hprep = &preps[nl - 1];
        let xh = &xs[nl - 1];
        let hraw = if nl == 1 { None } else { Some(head.bank.eval(xh.as_slice(), with_grad)?) };
        let hf = head.scaled(hraw.as_ref().unwrap_or(&cache.first[i]), hprep);
        let (mom, mtape) = head.moments(&hf, hprep);
        let ll = expected_loglik(target_at(&cache.data.targets, i), x0, &mom, self.noise_variance());
        let Some((grads, noise_bar)) = grad else {
            return Ok(ll.value);
        };
        *noise_bar += weight * ll.noise_bar;
        let mut fbar = DMatrix::zeros(hf.nrows(), hf.ncols());
        let hraw = hraw.as_ref().unwrap_or(&cache.first[i]);
        head.moments_backward(&hf, hraw, hprep, &mtape, &(ll.mean_bar * weight), &(ll.cov_bar * weight), &mut grads[nl - 1], &mut fbar);
        let mut xbar = DVector::zeros(xh.len());
        head.feature_backward(
            hraw,
            hprep,
            &fbar,
            &mut grads[nl - 1],
            (nl > 1).then_some(&mut xbar),
        );
        for l in (0..nl - 1).rev() {
            let layer = &self.layers[l];
            let x = &xs[l];
            let (g, tape) = &tapes[l];
            let (mut xb, gbar) = exp_backward(x, g, &xbar);
            let f = &fs[l];
            let mut fbar = DMatrix::zeros(f.nrows(), f.ncols());
            let raw = raws[l].as_ref().unwrap_or(&cache.first[i]);
            layer.sample_backward(f, raw, x, &preps[l], tape, &gbar, &mut grads[l], &mut fbar, &mut xb);
            layer.feature_backward(
                raw,
                &preps[l],
                &fbar,
                &mut grads[l],
                (l > 0).then_some(&mut xb),
            );
            xbar = xb;
        }
        Ok(ll.value)
    }

    /// Hidden trajectories and head moments at `xs` with explicit noise `noise[l][i]`.
    pub fn forward_sample(&self, xs: &[SpherePoint], noise: &[Vec<Vec<f64>>]) -> Result<Vec<ForwardSample>> {
        let nl = self.layers.len();
        if noise.len() != nl - 1 {
            return Err(Error::DimensionMismatch {
                expected: nl - 1,
                got: noise.len(),
            });
        }
        let preps = self.prepare()?;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                self.forward_one(&preps, x, |l, n| {
                    let e = noise[l].get(i).ok_or(Error::DimensionMismatch {
                        expected: xs.len(),
                        got: noise[l].len(),
                    })?;
                    if e.len() != n {
                        return Err(Error::DimensionMismatch { expected: n, got: e.len() });
                    }
                    Ok(e.clone())
                })
            })
            .collect()
    }

    fn forward_one(&self, preps: &[Prepared], x: &SpherePoint, mut noise: impl FnMut(usize, usize) -> Result<Vec<f64>>) -> Result<ForwardSample> {
        let nl = self.layers.len();
        let mut x = x.coords().clone();
        let mut states = vec![SpherePoint::from_unit_unchecked(x.clone())];
        for l in 0..nl - 1 {
            let layer = &self.layers[l];
            let raw = layer.bank.eval(x.as_slice(), false)?;
            let f = layer.scaled(&raw, &preps[l]);
            let eps = noise(l, layer.noise_len())?;
            let (g, _) = layer.sample(&f, &x, &preps[l], &eps)?;
            x = exp_forward(&x, &g);
            states.push(SpherePoint::from_unit_unchecked(x.clone()));
        }
        let head = self.head_layer();
        let raw = head.bank.eval(x.as_slice(), false)?;
        let f = head.scaled(&raw, &preps[nl - 1]);
        let (m, _) = head.moments(&f, &preps[nl - 1]);
        Ok(ForwardSample { states, head: m })
    }

    /// Head moments conditioned on `samples` hidden trajectories per test point.
    pub fn predict(&self, xs: &[SpherePoint], samples: usize, seed: u64) -> Result<Prediction> {
        if samples == 0 || samples > MAX_SAMPLES {
            return Err(Error::InvalidCount(format!("sample count {samples} outside 1..={MAX_SAMPLES}")));
        }
        let preps = self.prepare()?;
        let points = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if x.dim() != self.dim() {
                    return Err(Error::DimensionMismatch { expected: self.dim(), got: x.dim() });
                }
                let mut means = Vec::with_capacity(samples);
                let mut covs = Vec::with_capacity(samples);
                for s in 0..samples {
                    let fs = self.forward_one(&preps, x, |l, n| Ok(point_noise(seed, i, s, l, n)))?;
                    means.push(fs.head.mean);
                    covs.push(fs.head.cov);
                }
                Ok(PointPrediction { means, covs })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction { samples, points })
    }

    /// Mean negative log density of the Gaussian-mixture predictive.
    pub fn nlpd(&self, data: &Dataset, samples: usize, seed: u64) -> Result<f64> {
        let pred = self.predict(&data.inputs, samples, seed)?;
        nlpd_from_prediction(&pred, data, self.noise_variance())
    }

    pub fn mse(&self, data: &Dataset, samples: usize, seed: u64) -> Result<f64> {
        let pred = self.predict(&data.inputs, samples, seed)?;
        Ok(mse_from_prediction(&pred, &data.targets))
    }

    /// Pathwise posterior draw of the whole composition.
    pub fn deep_function_sample(&self, seed: u64) -> Result<DeepFunction> {
        let preps = self.prepare()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, (layer, prep)) in self.layers.iter().zip(&preps).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(l as u64);
            let w = layer.function_weights(prep, &mut rng)?;
            layers.push(LayerFunction::new(layer.bank.clone(), &prep.scales, &w));
        }
        let head = layers.pop().expect("head layer");
        Ok(DeepFunction { hidden: layers, head })
    }
}

pub fn nlpd_from_prediction(pred: &Prediction, data: &Dataset, noise_variance: f64) -> Result<f64> {
    if pred.points.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: pred.points.len(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidCount("NLPD of an empty test set".into()));
    }
    let mut total = 0.0;
    for (i, (p, x)) in pred.points.iter().zip(&data.inputs).enumerate() {
        let logs = p
            .means
            .iter()
            .zip(&p.covs)
            .map(|(m, c)| predictive_log_density(target_at(&data.targets, i), x.coords(), m, c, noise_variance))
            .collect::<Result<Vec<_>>>()?;
        total -= log_mean_exp(&logs);
    }
    Ok(total / data.len() as f64)
}

pub fn mse_from_prediction(pred: &Prediction, targets: &Targets) -> f64 {
    let n = pred.points.len();
    let mut total = 0.0;
    for (i, p) in pred.points.iter().enumerate() {
        let m = p.mixture_mean();
        total += match targets {
            Targets::Scalar(v) => (m[0] - v[i]).powi(2),
            Targets::Vector(v) => (m - &v[i]).norm_squared(),
        };
    }
    total / n as f64
}

/// Deterministic function draw `x ↦ head(x̂)` composed through the exponential map.
#[derive(Debug, Clone)]
pub struct DeepFunction {
    hidden: Vec<LayerFunction>,
    head: LayerFunction,
}

impl DeepFunction {
    /// Final hidden state reached from `x`.
    pub fn transport(&self, x: &SpherePoint) -> Result<SpherePoint> {
        let mut p = x.clone();
        for h in &self.hidden {
            let v = TangentVector::new(p.clone(), h.eval(&p)?)?;
            p = exp_map(&p, &v);
        }
        Ok(p)
    }

    pub fn eval(&self, x: &SpherePoint) -> Result<DVector<f64>> {
        self.head.eval(&self.transport(x)?)
    }

    /// Scalar head value.
    pub fn eval_scalar(&self, x: &SpherePoint) -> Result<f64> {
        Ok(self.eval(x)?[0])
    }
}
