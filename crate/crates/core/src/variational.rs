//! Whitened sparse variational layers.
//!
//! Two families are provided. The interdomain family (IV) places a Gaussian on
//! the whitened weights of the prior's own feature columns, so its posterior is
//! a finite basis expansion. The inducing-location family (IL) conditions on
//! tangent-space values at fixed points `z`, expressed in an orthonormal
//! tangent basis at each `z_j` so that the whitened covariance is full rank.
//!
//! Layers are evaluated against a flat constrained parameter vector; the
//! forward routines have hand-written adjoints used by the trainer.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureBank, RawFeatures, Scales};
use crate::gvf::GvfPrior;
use crate::kernels::{scalar_matern_kernel, MaternSpec, Smoothness};
use crate::params::{packed_index, packed_len, ParamBuilder, Transform};
use crate::sphere::{tangent_basis, SpherePoint, TangentVector};

/// Initial relative jitter added to inducing Gram matrices; escalated ×10 up to [`MAX_JITTER`].
pub const MIN_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;
/// Covariance eigenvalues below `-NEGATIVE_FLOOR` are treated as a numerical failure.
pub const NEGATIVE_FLOOR: f64 = 1e-8;
/// Lower bound of trainable smoothness.
pub const NU_FLOOR: f64 = 0.25;

/// Prior of one layer: a scalar GP (model head) or a Gaussian vector field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerPrior {
    Scalar(MaternSpec),
    Gvf(GvfPrior),
}

impl LayerPrior {
    pub fn components(&self) -> Vec<MaternSpec> {
        match self {
            Self::Scalar(s) => vec![*s],
            Self::Gvf(g) => g.components(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components()[0].dim
    }

    pub fn truncation(&self) -> usize {
        self.components()[0].truncation
    }

    /// Output dimension: 1 for scalar priors, `d+1` ambient coordinates for fields.
    pub fn output_dim(&self) -> usize {
        match self {
            Self::Scalar(_) => 1,
            Self::Gvf(_) => self.dim() + 1,
        }
    }

    pub(crate) fn bank(&self) -> Result<FeatureBank> {
        match self {
            Self::Scalar(s) => {
                s.validate()?;
                FeatureBank::scalar(s.dim, s.truncation)
            }
            Self::Gvf(g) => g.bank(),
        }
    }

    fn with_components(&self, specs: &[MaternSpec]) -> Self {
        match self {
            Self::Scalar(_) => Self::Scalar(specs[0]),
            Self::Gvf(GvfPrior::Projected { .. }) => Self::Gvf(GvfPrior::Projected {
                components: specs.to_vec(),
            }),
            Self::Gvf(GvfPrior::CoordinateFrame { .. }) => Self::Gvf(GvfPrior::CoordinateFrame {
                components: specs.to_vec(),
            }),
            Self::Gvf(GvfPrior::Hodge(_)) => Self::Gvf(GvfPrior::Hodge(crate::kernels::HodgeSpec {
                div: specs[0],
                curl: specs[1],
            })),
        }
    }

    fn block_by_group(&self) -> bool {
        !matches!(self, Self::Gvf(GvfPrior::Hodge(_)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvBlockState {
    pub mean: DVector<f64>,
    /// Lower-triangular factor of the block covariance.
    pub chol: DMatrix<f64>,
}

/// Interdomain state: whitened weights over feature columns of degree `≤ var_truncation`.
///
/// Columns above the variational truncation keep a diagonal covariance `D'`
/// with one value per degree; `tail = None` fixes `D' = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct IvState {
    pub var_truncation: usize,
    pub blocks: Vec<IvBlockState>,
    pub tail: Option<Vec<f64>>,
}

impl IvState {
    /// `m' = 0`, `S' = I`, and `D' = I` when `with_tail` is set.
    pub fn whitened_identity(prior: &LayerPrior, var_truncation: usize, with_tail: bool) -> Result<Self> {
        let layout = iv_layout(prior, var_truncation)?;
        Ok(Self {
            var_truncation,
            blocks: layout
                .blocks
                .iter()
                .map(|cols| IvBlockState {
                    mean: DVector::zeros(cols.len()),
                    chol: DMatrix::identity(cols.len(), cols.len()),
                })
                .collect(),
            tail: with_tail.then(|| vec![1.0; layout.tail_params]),
        })
    }

    /// Total number of whitened inducing variables.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.mean.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inducing-location state in tangent coordinates: for `z_j` with tangent basis
/// `B_j`, the inducing value is `B_j u_j` with `u ~ N(mean, chol cholᵀ)` after whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct IlState {
    pub z: Vec<SpherePoint>,
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
}

impl IlState {
    /// Coordinates per inducing point: `d` for vector fields, 1 for scalar priors.
    pub fn whitened_identity(z: Vec<SpherePoint>, prior: &LayerPrior) -> Self {
        let r = coords_per_point(prior);
        let n = z.len() * r;
        Self {
            z,
            mean: DVector::zeros(n),
            chol: DMatrix::identity(n, n),
        }
    }

    /// Projects ambient parameters `m̃ ∈ R^{mD}`, `S̃ = L̃L̃ᵀ` onto the tangent spaces at `z`.
    pub fn from_ambient(
        z: Vec<SpherePoint>,
        prior: &LayerPrior,
        mean: &DVector<f64>,
        factor: &DMatrix<f64>,
    ) -> Result<Self> {
        let b = il_coordinate_map(&z, prior);
        if mean.len() != b.nrows() || factor.nrows() != b.nrows() {
            return Err(Error::DimensionMismatch {
                expected: b.nrows(),
                got: mean.len(),
            });
        }
        let m = b.transpose() * mean;
        let s = b.transpose() * factor * factor.transpose() * &b;
        let chol = s
            .cholesky()
            .ok_or(Error::Cholesky {
                context: "projected inducing covariance",
                jitter: 0.0,
            })?
            .l();
        Ok(Self { z, mean: m, chol })
    }

    /// Ambient mean `P_z m̃` of the inducing values.
    pub fn ambient_mean(&self, prior: &LayerPrior) -> DVector<f64> {
        il_coordinate_map(&self.z, prior) * &self.mean
    }

    pub fn ambient_covariance(&self, prior: &LayerPrior) -> DMatrix<f64> {
        let b = il_coordinate_map(&self.z, prior);
        let f = &b * &self.chol;
        &f * f.transpose()
    }
}

fn coords_per_point(prior: &LayerPrior) -> usize {
    match prior {
        LayerPrior::Scalar(_) => 1,
        LayerPrior::Gvf(_) => prior.dim(),
    }
}

fn point_basis(z: &SpherePoint, prior: &LayerPrior) -> DMatrix<f64> {
    match prior {
        LayerPrior::Scalar(_) => DMatrix::identity(1, 1),
        LayerPrior::Gvf(_) => tangent_basis(z.coords()),
    }
}

/// Block-diagonal map from tangent coordinates to ambient values at all `z_j`.
fn il_coordinate_map(z: &[SpherePoint], prior: &LayerPrior) -> DMatrix<f64> {
    let q = prior.output_dim();
    let r = coords_per_point(prior);
    let mut b = DMatrix::zeros(z.len() * q, z.len() * r);
    for (j, zj) in z.iter().enumerate() {
        b.view_mut((j * q, j * r), (q, r)).copy_from(&point_basis(zj, prior));
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyState {
    Iv(IvState),
    Il(IlState),
}

/// A prior together with its variational state.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub prior: LayerPrior,
    pub state: FamilyState,
}

/// Posterior moments at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

struct IvLayout {
    blocks: Vec<Vec<usize>>,
    tail_cols: Vec<(usize, usize)>,
    tail_params: usize,
    tail_multiplicity: Vec<usize>,
}

fn iv_layout(prior: &LayerPrior, var_truncation: usize) -> Result<IvLayout> {
    let bank = prior.bank()?;
    iv_layout_for(&bank, prior.block_by_group(), var_truncation)
}

fn iv_layout_for(bank: &FeatureBank, by_group: bool, var_truncation: usize) -> Result<IvLayout> {
    let kmax = bank.kmax();
    if var_truncation > kmax {
        return Err(Error::Config(format!(
            "variational truncation {var_truncation} exceeds kernel truncation {kmax}"
        )));
    }
    let nblocks = if by_group { bank.groups() } else { 1 };
    let mut blocks = vec![Vec::new(); nblocks];
    let levels = kmax - var_truncation;
    let mut tail_cols = Vec::new();
    let mut tail_multiplicity = vec![0; levels];
    for (c, col) in bank.columns().iter().enumerate() {
        if col.degree <= var_truncation {
            blocks[if by_group { col.group } else { 0 }].push(c);
        } else {
            let p = col.degree - var_truncation - 1;
            tail_cols.push((c, p));
            tail_multiplicity[p] += 1;
        }
    }
    Ok(IvLayout {
        blocks,
        tail_params: levels,
        tail_cols,
        tail_multiplicity,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct GroupSlots {
    pub sigma2: usize,
    pub kappa: usize,
    pub nu: Option<usize>,
    pub truncation: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct IvBlock {
    pub cols: Vec<usize>,
    pub mean: usize,
    pub chol: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum FamilyLayout {
    Iv {
        var_truncation: usize,
        blocks: Vec<IvBlock>,
        /// `(column, parameter offset)` for columns above the variational truncation.
        tail: Vec<(usize, usize)>,
        tail_offset: usize,
        tail_multiplicity: Vec<usize>,
        tail_enabled: bool,
    },
    Il {
        z: Vec<SpherePoint>,
        /// Unscaled `B_jᵀ b_c(z_j)` stacked over `j`, `(m r) × M`.
        a_raw: DMatrix<f64>,
        mean: usize,
        chol: usize,
        n: usize,
    },
}

/// Options for registering a layer's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    pub train_hyper: bool,
    pub train_nu: bool,
    pub train_variational: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            train_hyper: true,
            train_nu: true,
            train_variational: true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub prior: LayerPrior,
    pub bank: FeatureBank,
    pub groups: Vec<GroupSlots>,
    pub family: FamilyLayout,
}

#[derive(Debug, Clone)]
pub(crate) struct IlPrepared {
    a: DMatrix<f64>,
    l: DMatrix<f64>,
    a_tilde: DMatrix<f64>,
    mean: DVector<f64>,
    lq: DMatrix<f64>,
    jitter: f64,
}

/// Per-evaluation quantities derived from the parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub scales: Scales,
    iv: Vec<(DVector<f64>, DMatrix<f64>)>,
    tail: Vec<f64>,
    il: Option<IlPrepared>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerGrad {
    scales: Vec<f64>,
    iv: Vec<(DVector<f64>, DMatrix<f64>)>,
    tail: Vec<f64>,
    /// Inducing layers: `Σ W̄ Wᵀ` (the whitened-feature adjoint times `Ãᵀ`), mean and factor adjoints.
    il: Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)>,
}

impl LayerGrad {
    pub fn scale(&mut self, c: f64) {
        self.scales.iter_mut().for_each(|v| *v *= c);
        for (m, l) in &mut self.iv {
            *m *= c;
            *l *= c;
        }
        self.tail.iter_mut().for_each(|v| *v *= c);
        if let Some((a, m, l)) = &mut self.il {
            *a *= c;
            *m *= c;
            *l *= c;
        }
    }
}

/// Saved forward quantities for a moment evaluation.
pub(crate) enum MomentTape {
    Iv(Vec<DMatrix<f64>>),
    Il { w: DMatrix<f64>, v: DMatrix<f64> },
}

/// Saved forward quantities for a sampled layer output.
pub(crate) enum SampleTape {
    Iv { w: Vec<DVector<f64>>, eps: Vec<f64> },
    Il { tape: MomentTape, eps: DVector<f64>, u: DMatrix<f64>, sqrt_eigs: DVector<f64> },
}

fn unpack_lower(theta: &[f64], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = theta[packed_index(i, j)];
        }
    }
    l
}

pub(crate) fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; packed_len(n)];
    for i in 0..n {
        for j in 0..=i {
            out[packed_index(i, j)] = m[(i, j)];
        }
    }
    out
}

fn add_packed_lower(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..=i {
            out[packed_index(i, j)] += m[(i, j)];
        }
    }
}

fn gather(f: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(f.nrows(), cols.len(), |b, j| f[(b, cols[j])])
}

fn scatter_add(target: &mut DMatrix<f64>, cols: &[usize], src: &DMatrix<f64>) {
    for (j, &c) in cols.iter().enumerate() {
        for b in 0..src.nrows() {
            target[(b, c)] += src[(b, j)];
        }
    }
}

/// `a bᵀ` for tall `a` (n × M) and short `b` (q × M), accumulated column by column.
fn mul_short_t(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(n, q);
    let o = out.as_mut_slice();
    for (c, ac) in a.as_slice().chunks_exact(n.max(1)).enumerate().take(a.ncols()) {
        for k in 0..q {
            let s = b[(k, c)];
            if s != 0.0 {
                for (y, x) in o[k * n..(k + 1) * n].iter_mut().zip(ac) {
                    *y += s * x;
                }
            }
        }
    }
    out
}

/// `g += u v` for thin `u` (n × q) and short `v` (q × M).
fn add_thin_product(g: &mut DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) {
    let n = g.nrows();
    let q = u.ncols();
    let us = u.as_slice();
    for (c, gc) in g.as_mut_slice().chunks_exact_mut(n.max(1)).enumerate().take(v.ncols()) {
        for k in 0..q {
            let s = v[(k, c)];
            if s != 0.0 {
                for (y, x) in gc.iter_mut().zip(&us[k * n..(k + 1) * n]) {
                    *y += s * x;
                }
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `g += uᵀ a` for thin `u` (n × q) and wide `a` (n × M); `g` is q × M.
fn add_thin_t_product(g: &mut DMatrix<f64>, u: &DMatrix<f64>, a: &DMatrix<f64>) {
    let n = a.nrows();
    let us = u.as_slice();
    for (c, ac) in a.as_slice().chunks_exact(n.max(1)).enumerate().take(a.ncols()) {
        for k in 0..u.ncols() {
            g[(k, c)] += dot(&us[k * n..(k + 1) * n], ac);
        }
    }
}

/// Cholesky with relative jitter escalation; returns the factor and the absolute jitter.
pub(crate) fn jittered_cholesky(k: &DMatrix<f64>, context: &'static str) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let scale = if n == 0 { 1.0 } else { k.trace() / n as f64 };
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut rel = MIN_JITTER;
    loop {
        let jitter = rel * scale;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Ok((c.l(), rel));
        }
        rel *= 10.0;
        if rel > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Cholesky { context, jitter: MAX_JITTER });
        }
    }
}

/// Adjoint of `K ↦ chol(K)` for symmetric `K`: returns the symmetric `K̄`.
pub(crate) fn cholesky_backward(l: &DMatrix<f64>, lbar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * lbar;
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // S = L⁻ᵀ P L⁻¹
    let left = l.tr_solve_lower_triangular(&p).expect("nonsingular factor");
    let s = l
        .tr_solve_lower_triangular(&left.transpose())
        .expect("nonsingular factor")
        .transpose();
    (&s + s.transpose()) * 0.5
}

fn lower_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            out[(i, j)] = 0.0;
        }
    }
    out
}

fn gaussian_kl_whitened(mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let n = mean.len() as f64;
    let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    0.5 * (l.norm_squared() + mean.norm_squared() - n - logdet)
}

/// `KL(q ‖ p)` of the whitened state against the standard normal prior.
pub fn kl_whitened(state: &FamilyState) -> f64 {
    match state {
        FamilyState::Iv(s) => {
            let blocks: f64 = s.blocks.iter().map(|b| gaussian_kl_whitened(&b.mean, &b.chol)).sum();
            blocks + s.tail.as_ref().map_or(0.0, |t| t.iter().map(|&d| tail_kl(d)).sum())
        }
        FamilyState::Il(s) => gaussian_kl_whitened(&s.mean, &s.chol),
    }
}

fn tail_kl(d: f64) -> f64 {
    0.5 * (d - 1.0 - d.ln())
}

impl Layer {
    /// Registers the layer's parameters in `builder` and returns the evaluable layer.
    pub fn build(vl: &VariationalLayer, name: &str, options: LayerOptions, builder: &mut ParamBuilder) -> Result<Self> {
        let bank = vl.prior.bank()?;
        let names: Vec<String> = match &vl.prior {
            LayerPrior::Scalar(_) => vec!["scalar".into()],
            LayerPrior::Gvf(GvfPrior::Hodge(_)) => vec!["div".into(), "curl".into()],
            LayerPrior::Gvf(_) => (0..bank.groups()).map(|g| format!("component{g}")).collect(),
        };
        let mut groups = Vec::new();
        for (spec, gname) in vl.prior.components().iter().zip(&names) {
            let sigma2 = builder.push(
                format!("{name}.{gname}.variance"),
                &[spec.sigma2],
                Transform::Softplus { floor: 0.0 },
                options.train_hyper,
            );
            let kappa = builder.push(
                format!("{name}.{gname}.lengthscale"),
                &[spec.kappa],
                Transform::Softplus { floor: 0.0 },
                options.train_hyper,
            );
            let nu = match spec.nu {
                Smoothness::Finite(v) => Some(builder.push(
                    format!("{name}.{gname}.smoothness"),
                    &[v],
                    Transform::Softplus { floor: NU_FLOOR },
                    options.train_hyper && options.train_nu,
                )),
                Smoothness::Infinite => None,
            };
            groups.push(GroupSlots {
                sigma2,
                kappa,
                nu,
                truncation: spec.truncation,
                dim: spec.dim,
            });
        }
        let family = match &vl.state {
            FamilyState::Iv(state) => {
                let layout = iv_layout_for(&bank, vl.prior.block_by_group(), state.var_truncation)?;
                if state.blocks.len() != layout.blocks.len() {
                    return Err(Error::DimensionMismatch {
                        expected: layout.blocks.len(),
                        got: state.blocks.len(),
                    });
                }
                let mut blocks = Vec::new();
                for (b, (cols, st)) in layout.blocks.into_iter().zip(&state.blocks).enumerate() {
                    if st.mean.len() != cols.len() || st.chol.nrows() != cols.len() {
                        return Err(Error::DimensionMismatch {
                            expected: cols.len(),
                            got: st.mean.len(),
                        });
                    }
                    let mean = builder.push(
                        format!("{name}.block{b}.mean"),
                        st.mean.as_slice(),
                        Transform::Identity,
                        options.train_variational,
                    );
                    let chol = builder.push(
                        format!("{name}.block{b}.factor"),
                        &pack_lower(&st.chol),
                        Transform::CholeskyFactor { n: cols.len() },
                        options.train_variational,
                    );
                    blocks.push(IvBlock { cols, mean, chol });
                }
                let tail_values = state.tail.clone().unwrap_or_else(|| vec![1.0; layout.tail_params]);
                if tail_values.len() != layout.tail_params {
                    return Err(Error::DimensionMismatch {
                        expected: layout.tail_params,
                        got: tail_values.len(),
                    });
                }
                let tail_offset = builder.push(
                    format!("{name}.tail"),
                    &tail_values,
                    Transform::Softplus { floor: 0.0 },
                    options.train_variational && state.tail.is_some(),
                );
                FamilyLayout::Iv {
                    var_truncation: state.var_truncation,
                    blocks,
                    tail: layout.tail_cols.iter().map(|&(c, p)| (c, tail_offset + p)).collect(),
                    tail_offset,
                    tail_multiplicity: layout.tail_multiplicity,
                    tail_enabled: state.tail.is_some(),
                }
            }
            FamilyState::Il(state) => {
                let r = coords_per_point(&vl.prior);
                let n = state.z.len() * r;
                if state.mean.len() != n || state.chol.nrows() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: state.mean.len(),
                    });
                }
                if state.z.is_empty() {
                    return Err(Error::InvalidCount("at least one inducing location".into()));
                }
                let mut a_raw = DMatrix::zeros(n, bank.len());
                for (j, zj) in state.z.iter().enumerate() {
                    let raw = bank.eval(zj.coords().as_slice(), false)?;
                    let f = DMatrix::from_column_slice(bank.q(), bank.len(), &raw.val);
                    let bj = point_basis(zj, &vl.prior);
                    a_raw.rows_mut(j * r, r).copy_from(&(bj.transpose() * f));
                }
                let mean = builder.push(
                    format!("{name}.inducing.mean"),
                    state.mean.as_slice(),
                    Transform::Identity,
                    options.train_variational,
                );
                let chol = builder.push(
                    format!("{name}.inducing.factor"),
                    &pack_lower(&state.chol),
                    Transform::CholeskyFactor { n },
                    options.train_variational,
                );
                FamilyLayout::Il {
                    z: state.z.clone(),
                    a_raw,
                    mean,
                    chol,
                    n,
                }
            }
        };
        Ok(Self {
            prior: vl.prior.clone(),
            bank,
            groups,
            family,
        })
    }

    pub fn q(&self) -> usize {
        self.bank.q()
    }

    pub fn is_single_block_iv(&self) -> bool {
        matches!(&self.family, FamilyLayout::Iv { blocks, tail, .. } if blocks.len() == 1 && tail.is_empty())
    }

    /// Mean and factor of the only block of a single-block interdomain layer.
    pub fn single_block<'a>(&self, prep: &'a Prepared) -> (&'a DVector<f64>, &'a DMatrix<f64>) {
        debug_assert!(self.is_single_block_iv());
        (&prep.iv[0].0, &prep.iv[0].1)
    }

    pub fn add_single_block_grad(&self, grad: &mut LayerGrad, mean: &DVector<f64>, chol: &DMatrix<f64>, scales: &[f64]) {
        grad.iv[0].0 += mean;
        grad.iv[0].1 += lower_part(chol);
        for (g, v) in grad.scales.iter_mut().zip(scales) {
            *g += v;
        }
    }

    pub fn is_field(&self) -> bool {
        matches!(self.prior, LayerPrior::Gvf(_))
    }

    pub fn specs(&self, theta: &[f64]) -> Vec<MaternSpec> {
        self.groups
            .iter()
            .map(|g| MaternSpec {
                nu: g.nu.map_or(Smoothness::Infinite, |o| Smoothness::Finite(theta[o])),
                kappa: theta[g.kappa],
                sigma2: theta[g.sigma2],
                truncation: g.truncation,
                dim: g.dim,
            })
            .collect()
    }

    /// Reconstructs the public description of this layer from `theta`.
    pub fn to_variational(&self, theta: &[f64]) -> VariationalLayer {
        let prior = self.prior.with_components(&self.specs(theta));
        let state = match &self.family {
            FamilyLayout::Iv {
                var_truncation,
                blocks,
                tail_offset,
                tail_multiplicity,
                tail_enabled,
                ..
            } => FamilyState::Iv(IvState {
                var_truncation: *var_truncation,
                blocks: blocks
                    .iter()
                    .map(|b| IvBlockState {
                        mean: DVector::from_column_slice(&theta[b.mean..b.mean + b.cols.len()]),
                        chol: unpack_lower(&theta[b.chol..], b.cols.len()),
                    })
                    .collect(),
                tail: tail_enabled
                    .then(|| theta[*tail_offset..*tail_offset + tail_multiplicity.len()].to_vec()),
            }),
            FamilyLayout::Il { z, mean, chol, n, .. } => FamilyState::Il(IlState {
                z: z.clone(),
                mean: DVector::from_column_slice(&theta[*mean..*mean + n]),
                chol: unpack_lower(&theta[*chol..], *n),
            }),
        };
        VariationalLayer { prior, state }
    }

    /// Length of the standard-normal draw consumed per point by [`Layer::sample`].
    pub fn noise_len(&self) -> usize {
        match &self.family {
            FamilyLayout::Iv { blocks, tail, .. } => blocks.iter().map(|b| b.cols.len()).sum::<usize>() + tail.len(),
            FamilyLayout::Il { .. } => self.q(),
        }
    }

    pub fn prepare(&self, theta: &[f64]) -> Result<Prepared> {
        let specs = self.specs(theta);
        for s in &specs {
            s.validate()?;
        }
        let scales = self.bank.scales(&specs);
        let mut iv = Vec::new();
        let mut tail = Vec::new();
        let mut il = None;
        match &self.family {
            FamilyLayout::Iv { blocks, tail: tc, .. } => {
                for b in blocks {
                    let n = b.cols.len();
                    iv.push((
                        DVector::from_column_slice(&theta[b.mean..b.mean + n]),
                        unpack_lower(&theta[b.chol..], n),
                    ));
                }
                tail = tc.iter().map(|&(_, p)| theta[p]).collect();
            }
            FamilyLayout::Il { a_raw, mean, chol, n, .. } => {
                let mut a = a_raw.clone();
                for (c, s) in scales.s.iter().enumerate() {
                    a.column_mut(c).scale_mut(*s);
                }
                let k = &a * a.transpose();
                let (l, jitter) = jittered_cholesky(&k, "inducing-location Gram")?;
                let a_tilde = l.solve_lower_triangular(&a).expect("nonsingular factor");
                il = Some(IlPrepared {
                    a,
                    l,
                    a_tilde,
                    mean: DVector::from_column_slice(&theta[*mean..*mean + n]),
                    lq: unpack_lower(&theta[*chol..], *n),
                    jitter,
                });
            }
        }
        Ok(Prepared {
            scales,
            iv,
            tail,
            il,
        })
    }

    pub fn zero_grad(&self, prep: &Prepared) -> LayerGrad {
        LayerGrad {
            scales: vec![0.0; self.bank.len()],
            iv: prep
                .iv
                .iter()
                .map(|(m, l)| (DVector::zeros(m.len()), DMatrix::zeros(l.nrows(), l.ncols())))
                .collect(),
            tail: vec![0.0; prep.tail.len()],
            il: prep.il.as_ref().map(|p| {
                (
                    DMatrix::zeros(p.a_tilde.nrows(), p.a_tilde.nrows()),
                    DVector::zeros(p.mean.len()),
                    DMatrix::zeros(p.lq.nrows(), p.lq.ncols()),
                )
            }),
        }
    }

    /// Scaled feature matrix `F = B diag(s)`, `q × M`.
    pub fn scaled(&self, raw: &RawFeatures, prep: &Prepared) -> DMatrix<f64> {
        let mut f = DMatrix::from_column_slice(self.q(), self.bank.len(), &raw.val);
        for (c, s) in prep.scales.s.iter().enumerate() {
            f.column_mut(c).scale_mut(*s);
        }
        f
    }

    /// Routes `F̄` to the scale adjoints and, when `xbar` is given, to the input.
    pub fn feature_backward(
        &self,
        raw: &RawFeatures,
        prep: &Prepared,
        fbar: &DMatrix<f64>,
        grad: &mut LayerGrad,
        xbar: Option<&mut DVector<f64>>,
    ) {
        let q = self.q();
        for c in 0..self.bank.len() {
            let col = raw.col(c);
            let mut acc = 0.0;
            for b in 0..q {
                acc += fbar[(b, c)] * col[b];
            }
            grad.scales[c] += acc;
        }
        if let Some(xbar) = xbar {
            let mut bar = vec![0.0; q * self.bank.len()];
            for c in 0..self.bank.len() {
                for b in 0..q {
                    bar[c * q + b] = fbar[(b, c)] * prep.scales.s[c];
                }
            }
            raw.pullback(&bar, xbar.as_mut_slice());
        }
    }

    pub fn moments(&self, f: &DMatrix<f64>, prep: &Prepared) -> (Moments, MomentTape) {
        let q = self.q();
        match &self.family {
            FamilyLayout::Iv { blocks, tail, .. } => {
                let mut mean = DVector::zeros(q);
                let mut cov = DMatrix::zeros(q, q);
                let mut tape = Vec::with_capacity(blocks.len());
                for (b, (m, l)) in blocks.iter().zip(&prep.iv) {
                    let fb = gather(f, &b.cols);
                    mean += &fb * m;
                    let g = &fb * l;
                    cov += &g * g.transpose();
                    tape.push(g);
                }
                for (t, &(c, _)) in tail.iter().enumerate() {
                    let fc = f.column(c);
                    cov += fc * fc.transpose() * prep.tail[t];
                }
                (Moments { mean, cov }, MomentTape::Iv(tape))
            }
            FamilyLayout::Il { .. } => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                let w = mul_short_t(&p.a_tilde, f);
                let mean = w.tr_mul(&p.mean);
                let v = p.lq.tr_mul(&w);
                let cov = f * f.transpose() - w.tr_mul(&w) + v.tr_mul(&v);
                (Moments { mean, cov }, MomentTape::Il { w, v })
            }
        }
    }

    /// Adjoint of [`Layer::moments`]; `cov_bar` must be symmetric. Adds to `fbar`.
    pub fn moments_backward(
        &self,
        f: &DMatrix<f64>,
        raw: &RawFeatures,
        prep: &Prepared,
        tape: &MomentTape,
        mean_bar: &DVector<f64>,
        cov_bar: &DMatrix<f64>,
        grad: &mut LayerGrad,
        fbar: &mut DMatrix<f64>,
    ) {
        match (&self.family, tape) {
            (FamilyLayout::Iv { blocks, tail, .. }, MomentTape::Iv(gs)) => {
                for (i, b) in blocks.iter().enumerate() {
                    let (m, l) = &prep.iv[i];
                    let fb = gather(f, &b.cols);
                    let (gm, gl) = &mut grad.iv[i];
                    *gm += fb.transpose() * mean_bar;
                    let mut fb_bar = mean_bar * m.transpose();
                    let g_bar = cov_bar * &gs[i] * 2.0;
                    *gl += fb.transpose() * &g_bar;
                    fb_bar += g_bar * l.transpose();
                    scatter_add(fbar, &b.cols, &fb_bar);
                }
                for (t, &(c, _)) in tail.iter().enumerate() {
                    let fc = f.column(c).clone_owned();
                    let cf = cov_bar * &fc;
                    grad.tail[t] += fc.dot(&cf);
                    let add = cf * (2.0 * prep.tail[t]);
                    let mut col = fbar.column_mut(c);
                    col += add;
                }
            }
            (FamilyLayout::Il { .. }, MomentTape::Il { w, v }) => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                let (gw, gm, glq) = grad.il.as_mut().expect("inducing gradient");
                *fbar += cov_bar * f * 2.0;
                let v_bar = v * (cov_bar * 2.0);
                let mut w_bar = &p.mean * mean_bar.transpose() - w * (cov_bar * 2.0);
                w_bar.gemm(1.0, &p.lq, &v_bar, 1.0);
                gm.gemv(1.0, w, mean_bar, 1.0);
                add_thin_product(glq, w, &v_bar.transpose());
                add_thin_product(gw, &w_bar, &w.transpose());
                // Ã̄ = W̄ F enters the scales only through columns of Ã, so
                // its scale adjoint is Σ_k raw[k, c] (W̄ᵀ Ã)[k, c].
                let mut pbar = DMatrix::zeros(f.nrows(), f.ncols());
                add_thin_t_product(&mut pbar, &w_bar, &p.a_tilde);
                for c in 0..f.ncols() {
                    let col = raw.col(c);
                    grad.scales[c] += (0..f.nrows()).map(|k| col[k] * pbar[(k, c)]).sum::<f64>();
                }
                *fbar += pbar;
            }
            _ => unreachable!("tape matches family"),
        }
    }

    /// Reparameterised draw of the layer output at one input `x` with feature matrix `f`.
    pub fn sample(&self, f: &DMatrix<f64>, x: &DVector<f64>, prep: &Prepared, eps: &[f64]) -> Result<(DVector<f64>, SampleTape)> {
        let q = self.q();
        match &self.family {
            FamilyLayout::Iv { blocks, tail, .. } => {
                let mut g = DVector::zeros(q);
                let mut ws = Vec::with_capacity(blocks.len());
                let mut off = 0;
                for (b, (m, l)) in blocks.iter().zip(&prep.iv) {
                    let n = b.cols.len();
                    let e = DVector::from_column_slice(&eps[off..off + n]);
                    off += n;
                    let w = m + l * e;
                    for (j, &c) in b.cols.iter().enumerate() {
                        g.axpy(w[j], &f.column(c), 1.0);
                    }
                    ws.push(w);
                }
                for (t, &(c, _)) in tail.iter().enumerate() {
                    g.axpy(prep.tail[t].sqrt() * eps[off + t], &f.column(c), 1.0);
                }
                Ok((
                    g,
                    SampleTape::Iv {
                        w: ws,
                        eps: eps.to_vec(),
                    },
                ))
            }
            FamilyLayout::Il { .. } => {
                let (moments, tape) = self.moments(f, prep);
                let tangent = self.is_field();
                let mut m = moments.cov.clone();
                m = (&m + m.transpose()) * 0.5;
                if tangent {
                    m += x * x.transpose();
                }
                let eig = m.symmetric_eigen();
                let mut sqrt_eigs = eig.eigenvalues.clone();
                for s in sqrt_eigs.iter_mut() {
                    if *s < -NEGATIVE_FLOOR {
                        return Err(Error::NegativeCovariance(*s));
                    }
                    *s = s.max(0.0).sqrt();
                }
                let u = eig.eigenvectors;
                let e = DVector::from_column_slice(&eps[..q]);
                let r = &u * DMatrix::from_diagonal(&sqrt_eigs) * u.transpose();
                let mut g = &moments.mean + &r * &e;
                if tangent {
                    g -= x * x.dot(&e);
                }
                Ok((
                    g,
                    SampleTape::Il {
                        tape,
                        eps: e,
                        u,
                        sqrt_eigs,
                    },
                ))
            }
        }
    }

    /// Adjoint of [`Layer::sample`]. Adds to `fbar` and `xbar`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_backward(
        &self,
        f: &DMatrix<f64>,
        raw: &RawFeatures,
        x: &DVector<f64>,
        prep: &Prepared,
        tape: &SampleTape,
        g_bar: &DVector<f64>,
        grad: &mut LayerGrad,
        fbar: &mut DMatrix<f64>,
        xbar: &mut DVector<f64>,
    ) {
        match (&self.family, tape) {
            (FamilyLayout::Iv { blocks, tail, .. }, SampleTape::Iv { w, eps }) => {
                let mut off = 0;
                for (i, b) in blocks.iter().enumerate() {
                    let n = b.cols.len();
                    let e = DVector::from_column_slice(&eps[off..off + n]);
                    off += n;
                    let mut w_bar = DVector::zeros(n);
                    for (j, &c) in b.cols.iter().enumerate() {
                        w_bar[j] = f.column(c).dot(g_bar);
                        let mut col = fbar.column_mut(c);
                        col.axpy(w[i][j], g_bar, 1.0);
                    }
                    let (gm, gl) = &mut grad.iv[i];
                    *gm += &w_bar;
                    *gl += lower_part(&(&w_bar * e.transpose()));
                }
                for (t, &(c, _)) in tail.iter().enumerate() {
                    let sd = prep.tail[t].sqrt();
                    let e = eps[off + t];
                    let proj = f.column(c).dot(g_bar);
                    if sd > 0.0 {
                        grad.tail[t] += proj * e / (2.0 * sd);
                    }
                    let mut col = fbar.column_mut(c);
                    col.axpy(sd * e, g_bar, 1.0);
                }
            }
            (
                FamilyLayout::Il { .. },
                SampleTape::Il {
                    tape: mtape,
                    eps,
                    u,
                    sqrt_eigs,
                    ..
                },
            ) => {
                let r_bar = g_bar * eps.transpose();
                let r_bar = (&r_bar + r_bar.transpose()) * 0.5;
                let y = u.transpose() * r_bar * u;
                let n = sqrt_eigs.len();
                let mtil = DMatrix::from_fn(n, n, |i, j| {
                    let den = sqrt_eigs[i] + sqrt_eigs[j];
                    if den > 0.0 {
                        y[(i, j)] / den
                    } else {
                        0.0
                    }
                });
                let m_bar = u * mtil * u.transpose();
                let m_bar = (&m_bar + m_bar.transpose()) * 0.5;
                if self.is_field() {
                    *xbar += &m_bar * x * 2.0;
                    *xbar -= g_bar * x.dot(eps) + eps * g_bar.dot(x);
                }
                self.moments_backward(f, raw, prep, mtape, g_bar, &m_bar, grad, fbar);
            }
            _ => unreachable!("tape matches family"),
        }
    }

    pub fn kl(&self, prep: &Prepared) -> f64 {
        match &self.family {
            FamilyLayout::Iv { tail_enabled, .. } => {
                let blocks: f64 = prep.iv.iter().map(|(m, l)| gaussian_kl_whitened(m, l)).sum();
                let tail: f64 = if *tail_enabled { prep.tail.iter().map(|&d| tail_kl(d)).sum() } else { 0.0 };
                blocks + tail
            }
            FamilyLayout::Il { .. } => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                gaussian_kl_whitened(&p.mean, &p.lq)
            }
        }
    }

    /// Adds `weight · ∂KL` to the gradient.
    pub fn kl_backward(&self, prep: &Prepared, weight: f64, grad: &mut LayerGrad) {
        let dl = |l: &DMatrix<f64>| {
            let mut d = l.clone();
            for i in 0..l.nrows() {
                d[(i, i)] -= 1.0 / l[(i, i)];
            }
            d
        };
        match &self.family {
            FamilyLayout::Iv { tail_enabled, .. } => {
                for ((m, l), (gm, gl)) in prep.iv.iter().zip(grad.iv.iter_mut()) {
                    gm.axpy(weight, m, 1.0);
                    *gl += dl(l) * weight;
                }
                if *tail_enabled {
                    for (g, &d) in grad.tail.iter_mut().zip(&prep.tail) {
                        *g += weight * 0.5 * (1.0 - 1.0 / d);
                    }
                }
            }
            FamilyLayout::Il { .. } => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                let (_, gm, glq) = grad.il.as_mut().expect("inducing gradient");
                gm.axpy(weight, &p.mean, 1.0);
                *glq += dl(&p.lq) * weight;
            }
        }
    }

    /// Converts accumulated adjoints into constrained-parameter gradients.
    pub fn finalize(&self, prep: &Prepared, mut grad: LayerGrad, out: &mut [f64]) {
        match &self.family {
            FamilyLayout::Iv { blocks, tail, .. } => {
                for (b, (gm, gl)) in blocks.iter().zip(&grad.iv) {
                    for (j, v) in gm.iter().enumerate() {
                        out[b.mean + j] += v;
                    }
                    add_packed_lower(gl, &mut out[b.chol..]);
                }
                for (t, &(_, p)) in tail.iter().enumerate() {
                    out[p] += grad.tail[t];
                }
            }
            FamilyLayout::Il { a_raw, mean, chol, .. } => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                let (gw, gm, glq) = grad.il.take().expect("inducing gradient");
                for (j, v) in gm.iter().enumerate() {
                    out[mean + j] += v;
                }
                add_packed_lower(&lower_part(&glq), &mut out[*chol..]);
                // Ã = L⁻¹A; the direct Ā = L⁻ᵀ Ã̄ term is already in the scale adjoints
                let gl = lower_part(&(-p.l.tr_solve_lower_triangular(&gw).expect("nonsingular factor")));
                let gk = cholesky_backward(&p.l, &gl);
                let n = p.a.nrows() as f64;
                let ga = &gk * &p.a * 2.0 + &p.a * (2.0 * p.jitter * gk.trace() / n);
                for c in 0..a_raw.ncols() {
                    grad.scales[c] += ga.column(c).dot(&a_raw.column(c));
                }
            }
        }
        for (c, col) in self.bank.columns().iter().enumerate() {
            let g = grad.scales[c];
            if g == 0.0 {
                continue;
            }
            let slots = &self.groups[col.group];
            let ds = prep.scales.ds[c];
            out[slots.sigma2] += g * ds[0];
            out[slots.kappa] += g * ds[1];
            if let Some(o) = slots.nu {
                out[o] += g * ds[2];
            }
        }
    }

    /// Weights `w` such that `x ↦ F(x) w` is a posterior function draw.
    pub fn function_weights(&self, prep: &Prepared, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let m = self.bank.len();
        let mut w = DVector::zeros(m);
        match &self.family {
            FamilyLayout::Iv { blocks, tail, .. } => {
                for (b, (mean, l)) in blocks.iter().zip(&prep.iv) {
                    let e = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
                    let wb = mean + l * e;
                    for (j, &c) in b.cols.iter().enumerate() {
                        w[c] = wb[j];
                    }
                }
                for (t, &(c, _)) in tail.iter().enumerate() {
                    let e: f64 = StandardNormal.sample(rng);
                    w[c] = prep.tail[t].sqrt() * e;
                }
            }
            FamilyLayout::Il { .. } => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                let w0 = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
                let e = DVector::from_fn(p.mean.len(), |_, _| StandardNormal.sample(rng));
                let u = &p.mean + &p.lq * e;
                let resid = u - &p.a_tilde * &w0;
                let back = p.l.tr_solve_lower_triangular(&resid).expect("nonsingular factor");
                w = w0 + p.a.transpose() * back;
            }
        }
        Ok(w)
    }
}

/// A layer function draw `x ↦ F(x) w`.
#[derive(Debug, Clone)]
pub struct LayerFunction {
    bank: FeatureBank,
    weighted: DVector<f64>,
}

impl LayerFunction {
    pub(crate) fn new(bank: FeatureBank, scales: &Scales, w: &DVector<f64>) -> Self {
        let weighted = DVector::from_iterator(w.len(), w.iter().zip(&scales.s).map(|(a, s)| a * s));
        Self { bank, weighted }
    }

    pub fn output_dim(&self) -> usize {
        self.bank.q()
    }

    /// Value at an ambient point (scalar priors return a length-1 vector).
    pub fn eval_coords(&self, x: &[f64]) -> Result<DVector<f64>> {
        let raw = self.bank.eval(x, false)?;
        Ok(DVector::from_vec(raw.apply(self.weighted.as_slice())))
    }

    pub fn eval(&self, x: &SpherePoint) -> Result<DVector<f64>> {
        self.eval_coords(x.coords().as_slice())
    }

    pub fn eval_tangent(&self, x: &SpherePoint) -> Result<TangentVector> {
        TangentVector::new(x.clone(), self.eval(x)?)
    }
}

impl VariationalLayer {
    pub fn new(prior: LayerPrior, state: FamilyState) -> Result<Self> {
        let vl = Self { prior, state };
        vl.compile()?;
        Ok(vl)
    }

    /// Whitened-identity interdomain layer with variational truncation equal to the kernel truncation.
    pub fn interdomain(prior: LayerPrior) -> Result<Self> {
        let k = prior.truncation();
        let state = FamilyState::Iv(IvState::whitened_identity(&prior, k, false)?);
        Self::new(prior, state)
    }

    pub fn inducing(prior: LayerPrior, z: Vec<SpherePoint>) -> Result<Self> {
        let state = FamilyState::Il(IlState::whitened_identity(z, &prior));
        Self::new(prior, state)
    }

    pub(crate) fn compile(&self) -> Result<(Layer, Vec<f64>)> {
        let mut b = ParamBuilder::default();
        let layer = Layer::build(self, "layer", LayerOptions::default(), &mut b)?;
        Ok((layer, b.values))
    }

    /// Prior moments: zero mean and `Σ_c f_c f_cᵀ` at each point.
    pub fn prior_moments(&self, xs: &[SpherePoint]) -> Result<Vec<Moments>> {
        let (layer, theta) = self.compile()?;
        let prep = layer.prepare(&theta)?;
        xs.iter()
            .map(|x| {
                let raw = layer.bank.eval(x.coords().as_slice(), false)?;
                let f = layer.scaled(&raw, &prep);
                Ok(Moments {
                    mean: DVector::zeros(layer.q()),
                    cov: &f * f.transpose(),
                })
            })
            .collect()
    }

    pub fn posterior(&self, xs: &[SpherePoint]) -> Result<Vec<Moments>> {
        let (layer, theta) = self.compile()?;
        let prep = layer.prepare(&theta)?;
        xs.iter()
            .map(|x| {
                let raw = layer.bank.eval(x.coords().as_slice(), false)?;
                let f = layer.scaled(&raw, &prep);
                Ok(layer.moments(&f, &prep).0)
            })
            .collect()
    }

    /// Joint posterior covariance between two inputs (`q × q`).
    pub fn posterior_cross_covariance(&self, x: &SpherePoint, y: &SpherePoint) -> Result<DMatrix<f64>> {
        let (layer, theta) = self.compile()?;
        let prep = layer.prepare(&theta)?;
        let fx = layer.scaled(&layer.bank.eval(x.coords().as_slice(), false)?, &prep);
        let fy = layer.scaled(&layer.bank.eval(y.coords().as_slice(), false)?, &prep);
        Ok(match &layer.family {
            FamilyLayout::Iv { blocks, tail, .. } => {
                let mut c = DMatrix::zeros(layer.q(), layer.q());
                for (b, (_, l)) in blocks.iter().zip(&prep.iv) {
                    c += gather(&fx, &b.cols) * l * l.transpose() * gather(&fy, &b.cols).transpose();
                }
                for (t, &(col, _)) in tail.iter().enumerate() {
                    c += fx.column(col) * fy.column(col).transpose() * prep.tail[t];
                }
                c
            }
            FamilyLayout::Il { .. } => {
                let p = prep.il.as_ref().expect("prepared inducing layer");
                let wx = &p.a_tilde * fx.transpose();
                let wy = &p.a_tilde * fy.transpose();
                &fx * fy.transpose() - wx.transpose() * &wy + (p.lq.transpose() * wx).transpose() * (p.lq.transpose() * wy)
            }
        })
    }

    pub fn output_dim(&self) -> usize {
        self.prior.output_dim()
    }
}

/// Interdomain posterior moments `Ψᵀm'`, `ΨᵀS'Ψ + Ψ_tailᵀD'Ψ_tail` at each input.
pub fn iv_posterior(layer: &VariationalLayer, xs: &[SpherePoint]) -> Result<Vec<Moments>> {
    if !matches!(layer.state, FamilyState::Iv(_)) {
        return Err(Error::Config("iv_posterior needs an interdomain state".into()));
    }
    layer.posterior(xs)
}

/// Inducing-location posterior moments in whitened form at each input.
pub fn il_posterior(layer: &VariationalLayer, xs: &[SpherePoint]) -> Result<Vec<Moments>> {
    if !matches!(layer.state, FamilyState::Il(_)) {
        return Err(Error::Config("il_posterior needs an inducing-location state".into()));
    }
    layer.posterior(xs)
}

/// Reparameterised per-point draws; `noise[i]` must hold [`layer_noise_len`] standard normals.
pub fn layer_sample_at(layer: &VariationalLayer, xs: &[SpherePoint], noise: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
    let (l, theta) = layer.compile()?;
    let prep = l.prepare(&theta)?;
    if noise.len() != xs.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: noise.len(),
        });
    }
    xs.iter()
        .zip(noise)
        .map(|(x, e)| {
            if e.len() != l.noise_len() {
                return Err(Error::DimensionMismatch {
                    expected: l.noise_len(),
                    got: e.len(),
                });
            }
            let raw = l.bank.eval(x.coords().as_slice(), false)?;
            let f = l.scaled(&raw, &prep);
            Ok(l.sample(&f, x.coords(), &prep, e)?.0)
        })
        .collect()
}

pub fn layer_noise_len(layer: &VariationalLayer) -> Result<usize> {
    Ok(layer.compile()?.0.noise_len())
}

/// Pathwise posterior function draw seeded by `seed`.
pub fn layer_function_sample(layer: &VariationalLayer, seed: u64) -> Result<LayerFunction> {
    let (l, theta) = layer.compile()?;
    let prep = l.prepare(&theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = l.function_weights(&prep, &mut rng)?;
    Ok(LayerFunction::new(l.bank.clone(), &prep.scales, &w))
}

/// Exact GP regression with a truncated scalar Matérn kernel and diagonal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGp {
    pub spec: MaternSpec,
    pub inputs: Vec<SpherePoint>,
    pub targets: DVector<f64>,
    pub noise: DVector<f64>,
}

impl ExactGp {
    pub fn new(spec: MaternSpec, inputs: Vec<SpherePoint>, targets: DVector<f64>, noise_variance: f64) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let n = inputs.len();
        Ok(Self {
            spec,
            inputs,
            targets,
            noise: DVector::from_element(n, noise_variance),
        })
    }

    fn gram(&self, a: &[SpherePoint], b: &[SpherePoint]) -> Result<DMatrix<f64>> {
        let mut k = DMatrix::zeros(a.len(), b.len());
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                k[(i, j)] = scalar_matern_kernel(&self.spec, x, y)?;
            }
        }
        Ok(k)
    }

    fn factor(&self) -> Result<DMatrix<f64>> {
        let mut k = self.gram(&self.inputs, &self.inputs)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise[i];
        }
        if let Some(c) = k.clone().cholesky() {
            return Ok(c.l());
        }
        for i in 0..k.nrows() {
            k[(i, i)] += 1e-8;
        }
        k.cholesky().map(|c| c.l()).ok_or(Error::Cholesky {
            context: "exact GP Gram",
            jitter: 1e-8,
        })
    }

    /// `log N(y; 0, K + Σ)`.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let n = self.inputs.len() as f64;
        if self.inputs.is_empty() {
            return Ok(0.0);
        }
        let l = self.factor()?;
        let alpha = l.solve_lower_triangular(&self.targets).expect("nonsingular factor");
        let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        Ok(-0.5 * (alpha.norm_squared() + logdet + n * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// Posterior mean and covariance of the latent function at `xs`.
pub fn exact_posterior(gp: &ExactGp, xs: &[SpherePoint]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kss = gp.gram(xs, xs)?;
    if gp.inputs.is_empty() {
        return Ok((DVector::zeros(xs.len()), kss));
    }
    let l = gp.factor()?;
    let ksx = gp.gram(xs, &gp.inputs)?;
    let v = l.solve_lower_triangular(&ksx.transpose()).expect("nonsingular factor");
    let alpha = l.solve_lower_triangular(&gp.targets).expect("nonsingular factor");
    let mean = v.transpose() * alpha;
    let cov = kss - v.transpose() * v;
    Ok((mean, cov))
}
