//! Explicit feature columns shared by kernels, priors and variational layers.
//!
//! Every supported prior is a finite sum `Σ_c s_c b_c(x) b_c(x')ᵀ` where the
//! basis column `b_c` is built from one scalar harmonic and the scale `s_c`
//! depends only on the hyperparameters of the column's group.

use crate::error::{Error, Result};
use crate::gvf::frame_with_jacobian;
use crate::harmonics::{harmonic_count, laplace_eigenvalue, sphere_volume, HarmonicBasis};
use crate::kernels::{log_spectral_weight_derivatives, MaternSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BasisKind {
    Scalar,
    /// `(e_i - x x_i) φ`.
    Projected(usize),
    /// `e_i(x) φ` in the spherical frame.
    Frame(usize),
    /// `P_x ∇φ / √λ`.
    Div,
    /// `x × ∇φ / √λ`.
    Curl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Column {
    pub group: usize,
    pub harmonic: usize,
    pub degree: usize,
    pub kind: BasisKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Normalisation {
    /// `C = Σ_k Φ(λ_k) N(k,d) / vol(S_d)`.
    Scalar,
    /// `C = Σ_{k≥1} Φ(λ_k)(2k+1) / vol(S_2)`.
    Hodge,
}

#[derive(Debug, Clone)]
pub(crate) struct FeatureBank {
    d: usize,
    q: usize,
    kmax: usize,
    basis: HarmonicBasis,
    columns: Vec<Column>,
    groups: usize,
    normalisation: Normalisation,
    hodge: bool,
}

/// Raw (unscaled) basis values at one point, column-major `q × M`, and optionally
/// the ambient Jacobian `jac[(c·q + b)·D + a] = ∂b_c[b]/∂x_a`.
#[derive(Debug, Clone)]
pub(crate) struct RawFeatures {
    pub q: usize,
    pub dim: usize,
    pub val: Vec<f64>,
    pub jac: Vec<f64>,
}

impl RawFeatures {
    pub fn col(&self, c: usize) -> &[f64] {
        &self.val[c * self.q..(c + 1) * self.q]
    }

    /// `Σ_c b_c w_c`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        for (c, &wc) in w.iter().enumerate() {
            if wc != 0.0 {
                for (o, v) in out.iter_mut().zip(self.col(c)) {
                    *o += v * wc;
                }
            }
        }
        out
    }

    /// Adds `Σ_{c,b} bar[c·q + b] ∂b_c[b]/∂x` to `xbar`.
    pub fn pullback(&self, bar: &[f64], xbar: &mut [f64]) {
        let d = self.dim;
        for (i, &g) in bar.iter().enumerate() {
            if g != 0.0 {
                let row = &self.jac[i * d..(i + 1) * d];
                for (xa, r) in xbar.iter_mut().zip(row) {
                    *xa += g * r;
                }
            }
        }
    }
}

/// Column scales `s_c = √(σ² Φ(λ_k) / C)` and `∂s_c/∂(σ², κ, ν)`.
#[derive(Debug, Clone)]
pub(crate) struct Scales {
    pub s: Vec<f64>,
    pub ds: Vec<[f64; 3]>,
}

impl FeatureBank {
    fn build(d: usize, kmax: usize, q: usize, kinds: &[BasisKind], normalisation: Normalisation) -> Result<Self> {
        let basis = HarmonicBasis::new(d, kmax)?;
        let hodge = normalisation == Normalisation::Hodge;
        let mut columns = Vec::new();
        for (group, &kind) in kinds.iter().enumerate() {
            for h in 0..basis.len() {
                let degree = basis.degree(h);
                if hodge && degree == 0 {
                    continue;
                }
                columns.push(Column {
                    group,
                    harmonic: h,
                    degree,
                    kind,
                });
            }
        }
        Ok(Self {
            d,
            q,
            kmax,
            basis,
            columns,
            groups: kinds.len(),
            normalisation,
            hodge,
        })
    }

    pub fn scalar(d: usize, kmax: usize) -> Result<Self> {
        Self::build(d, kmax, 1, &[BasisKind::Scalar], Normalisation::Scalar)
    }

    pub fn projected(d: usize, kmax: usize) -> Result<Self> {
        let kinds: Vec<_> = (0..=d).map(BasisKind::Projected).collect();
        Self::build(d, kmax, d + 1, &kinds, Normalisation::Scalar)
    }

    pub fn frame(kmax: usize) -> Result<Self> {
        Self::build(2, kmax, 3, &[BasisKind::Frame(0), BasisKind::Frame(1)], Normalisation::Scalar)
    }

    pub fn hodge(kmax: usize) -> Result<Self> {
        Self::build(2, kmax, 3, &[BasisKind::Div, BasisKind::Curl], Normalisation::Hodge)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Lowest degree carried by any column.
    pub fn min_degree(&self) -> usize {
        usize::from(self.hodge)
    }

    pub fn eval(&self, x: &[f64], with_jac: bool) -> Result<RawFeatures> {
        let dd = self.d + 1;
        if x.len() != dd {
            return Err(Error::DimensionMismatch {
                expected: dd,
                got: x.len(),
            });
        }
        let q = self.q;
        let m = self.columns.len();
        let mut val = vec![0.0; m * q];
        let mut jac = if with_jac { vec![0.0; m * q * dd] } else { Vec::new() };

        if self.hodge {
            let (hg, hh) = if with_jac {
                let (_, g, h) = self.basis.eval_hessian(x);
                (g, h)
            } else {
                (self.basis.eval_gradient(x).1, Vec::new())
            };
            for (c, col) in self.columns.iter().enumerate() {
                let h = col.harmonic;
                let inv = 1.0 / laplace_eigenvalue(col.degree, 2).sqrt();
                let g = &hg[3 * h..3 * h + 3];
                let xg = x[0] * g[0] + x[1] * g[1] + x[2] * g[2];
                let out = &mut val[c * 3..c * 3 + 3];
                match col.kind {
                    BasisKind::Div => {
                        for b in 0..3 {
                            out[b] = (g[b] - x[b] * xg) * inv;
                        }
                    }
                    _ => {
                        out[0] = (x[1] * g[2] - x[2] * g[1]) * inv;
                        out[1] = (x[2] * g[0] - x[0] * g[2]) * inv;
                        out[2] = (x[0] * g[1] - x[1] * g[0]) * inv;
                    }
                }
                if with_jac {
                    let hs = &hh[9 * h..9 * h + 9];
                    let hx: [f64; 3] =
                        std::array::from_fn(|a| hs[3 * a] * x[0] + hs[3 * a + 1] * x[1] + hs[3 * a + 2] * x[2]);
                    let j = &mut jac[c * 9..c * 9 + 9];
                    match col.kind {
                        BasisKind::Div => {
                            for b in 0..3 {
                                for a in 0..3 {
                                    let delta = if a == b { xg } else { 0.0 };
                                    j[3 * b + a] = (hs[3 * b + a] - delta - x[b] * (g[a] + hx[a])) * inv;
                                }
                            }
                        }
                        _ => {
                            // ∂(x × g)/∂x_a = e_a × g + x × H e_a
                            for a in 0..3 {
                                let mut ea = [0.0; 3];
                                ea[a] = 1.0;
                                let hcol = [hs[a], hs[3 + a], hs[6 + a]];
                                let c1 = cross3(&ea, g);
                                let c2 = cross3(x, &hcol);
                                for b in 0..3 {
                                    j[3 * b + a] = (c1[b] + c2[b]) * inv;
                                }
                            }
                        }
                    }
                }
            }
            return Ok(RawFeatures { q, dim: dd, val, jac });
        }

        let (hv, hg) = if with_jac {
            self.basis.eval_gradient(x)
        } else {
            (self.basis.eval(x), Vec::new())
        };
        let frame = if self.columns.iter().any(|c| matches!(c.kind, BasisKind::Frame(_))) {
            Some(frame_with_jacobian(x)?)
        } else {
            None
        };
        for (c, col) in self.columns.iter().enumerate() {
            let h = col.harmonic;
            let hval = hv[h];
            let out = &mut val[c * q..(c + 1) * q];
            match col.kind {
                BasisKind::Scalar => {
                    out[0] = hval;
                    if with_jac {
                        jac[c * dd..(c + 1) * dd].copy_from_slice(&hg[h * dd..(h + 1) * dd]);
                    }
                }
                BasisKind::Projected(i) => {
                    for b in 0..q {
                        let p = if b == i { 1.0 } else { 0.0 } - x[b] * x[i];
                        out[b] = p * hval;
                    }
                    if with_jac {
                        let g = &hg[h * dd..(h + 1) * dd];
                        for b in 0..q {
                            let p = if b == i { 1.0 } else { 0.0 } - x[b] * x[i];
                            for a in 0..dd {
                                let dp = -(if a == b { x[i] } else { 0.0 }) - if a == i { x[b] } else { 0.0 };
                                jac[(c * q + b) * dd + a] = p * g[a] + dp * hval;
                            }
                        }
                    }
                }
                BasisKind::Frame(i) => {
                    let (e, je) = frame.as_ref().expect("frame evaluated");
                    for b in 0..3 {
                        out[b] = e[i][b] * hval;
                    }
                    if with_jac {
                        let g = &hg[h * 3..h * 3 + 3];
                        for b in 0..3 {
                            for a in 0..3 {
                                jac[(c * 3 + b) * 3 + a] = je[i][b][a] * hval + e[i][b] * g[a];
                            }
                        }
                    }
                }
                BasisKind::Div | BasisKind::Curl => unreachable!("vector harmonics only in Hodge banks"),
            }
        }
        Ok(RawFeatures { q, dim: dd, val, jac })
    }

    /// Scales for the given group specs.
    pub fn scales(&self, specs: &[MaternSpec]) -> Scales {
        assert_eq!(specs.len(), self.groups, "one spec per feature group");
        let per_group: Vec<Vec<(f64, [f64; 3])>> = specs.iter().map(|s| self.degree_scales(s)).collect();
        let mut s = Vec::with_capacity(self.columns.len());
        let mut ds = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let (v, d) = per_group[col.group][col.degree];
            s.push(v);
            ds.push(d);
        }
        Scales { s, ds }
    }

    /// Per degree: scale and its derivatives with respect to `(σ², κ, ν)`.
    fn degree_scales(&self, spec: &MaternSpec) -> Vec<(f64, [f64; 3])> {
        let lw = spec.log_weights();
        let start = self.min_degree();
        let (log_mult, vol): (Vec<f64>, f64) = match self.normalisation {
            Normalisation::Scalar => (
                (0..=self.kmax).map(|k| (harmonic_count(k, self.d) as f64).ln()).collect(),
                sphere_volume(self.d),
            ),
            Normalisation::Hodge => ((0..=self.kmax).map(|k| ((2 * k + 1) as f64).ln()).collect(), sphere_volume(2)),
        };
        let terms: Vec<f64> = (start..=self.kmax).map(|k| lw[k] + log_mult[k]).collect();
        if terms.is_empty() {
            return vec![(0.0, [0.0; 3]); self.kmax + 1];
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        let log_c = max + total.ln() - vol.ln();
        let derivs: Vec<(f64, f64)> = (0..=self.kmax)
            .map(|k| log_spectral_weight_derivatives(spec, laplace_eigenvalue(k, spec.dim)))
            .collect();
        let mut mean_nu = 0.0;
        let mut mean_kappa = 0.0;
        for (i, k) in (start..=self.kmax).enumerate() {
            let w = (terms[i] - max).exp() / total;
            mean_nu += w * derivs[k].0;
            mean_kappa += w * derivs[k].1;
        }
        (0..=self.kmax)
            .map(|k| {
                if k < start {
                    return (0.0, [0.0; 3]);
                }
                let s = (spec.sigma2 * (lw[k] - log_c).exp()).sqrt();
                let d_sigma2 = if spec.sigma2 > 0.0 { s / (2.0 * spec.sigma2) } else { 0.0 };
                let d_kappa = 0.5 * s * (derivs[k].1 - mean_kappa);
                let d_nu = 0.5 * s * (derivs[k].0 - mean_nu);
                (s, [d_sigma2, d_kappa, d_nu])
            })
            .collect()
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
