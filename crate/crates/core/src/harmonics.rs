//! Gegenbauer polynomials, Laplace–Beltrami spectra and real spherical harmonics.
//!
//! Two independent constructions of the scalar harmonics are provided:
//! [`scalar_harmonics_s2`] uses associated Legendre functions in colatitude and
//! longitude, while [`HarmonicBasis`] builds orthonormal harmonics on any
//! `S_d` as products of homogeneous Gegenbauer polynomials in Cartesian
//! coordinates. The Cartesian form is a polynomial in the ambient
//! coordinates, which is what makes its derivatives cheap to propagate.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::jet::{Field, Jet1, Jet2};
use crate::sphere::{cross, SpherePoint};

/// Largest embedding dimension with a compiled derivative kernel.
pub const MAX_EMBEDDING_DIM: usize = 12;

const DOMAIN_SLACK: f64 = 1e-9;

/// Gegenbauer polynomial `C_k^(α)(t)` with its first two derivatives.
pub fn gegenbauer(k: usize, alpha: f64, t: f64) -> Result<(f64, f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::Domain {
            function: "gegenbauer (alpha)",
            value: alpha,
        });
    }
    let t = clamp_unit(t, "gegenbauer")?;
    let value = gegenbauer_value(k, alpha, t);
    let d1 = if k >= 1 {
        2.0 * alpha * gegenbauer_value(k - 1, alpha + 1.0, t)
    } else {
        0.0
    };
    let d2 = if k >= 2 {
        4.0 * alpha * (alpha + 1.0) * gegenbauer_value(k - 2, alpha + 2.0, t)
    } else {
        0.0
    };
    Ok((value, d1, d2))
}

pub(crate) fn clamp_unit(t: f64, function: &'static str) -> Result<f64> {
    if !(t >= -1.0 - DOMAIN_SLACK && t <= 1.0 + DOMAIN_SLACK) {
        return Err(Error::Domain { function, value: t });
    }
    Ok(t.clamp(-1.0, 1.0))
}

/// Three-term recurrence for a single degree.
pub fn gegenbauer_value(k: usize, alpha: f64, t: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = 2.0 * alpha * t;
    for n in 2..=k {
        let nf = n as f64;
        let next = (2.0 * (nf - 1.0 + alpha) * t * cur - (nf - 2.0 + 2.0 * alpha) * prev) / nf;
        prev = cur;
        cur = next;
    }
    cur
}

/// `C_n^(α)(t)` for every `n ≤ kmax`.
pub fn gegenbauer_series(kmax: usize, alpha: f64, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(kmax + 1);
    out.push(1.0);
    if kmax >= 1 {
        out.push(2.0 * alpha * t);
    }
    for n in 2..=kmax {
        let nf = n as f64;
        let next = (2.0 * (nf - 1.0 + alpha) * t * out[n - 1] - (nf - 2.0 + 2.0 * alpha) * out[n - 2]) / nf;
        out.push(next);
    }
    out
}

/// `C_k^(α)(1) = Γ(k+2α) / (k! Γ(2α))`.
pub fn gegenbauer_at_one(k: usize, alpha: f64) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * (i as f64 - 1.0 + 2.0 * alpha) / i as f64)
}

/// Eigenvalue `k(k+d-1)` of `-Δ` on `S_d` for degree-`k` harmonics.
pub fn laplace_eigenvalue(k: usize, d: usize) -> f64 {
    (k * (k + d - 1)) as f64
}

/// Dimension `N(k, d)` of the degree-`k` eigenspace on `S_d`.
pub fn harmonic_count(k: usize, d: usize) -> usize {
    assert!(d >= 1, "sphere dimension must be positive");
    if d == 1 {
        return if k == 0 { 1 } else { 2 };
    }
    let hi = binomial(k + d, d);
    let lo = if k >= 2 { binomial(k + d - 2, d) } else { 0 };
    (hi - lo) as usize
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Total number of harmonics of degree `≤ kmax` on `S_d`.
pub fn harmonic_total(kmax: usize, d: usize) -> usize {
    (0..=kmax).map(|k| harmonic_count(k, d)).sum()
}

/// Surface area `2π^((d+1)/2) / Γ((d+1)/2)` of `S_d`.
pub fn sphere_volume(d: usize) -> f64 {
    let h = (d as f64 + 1.0) / 2.0;
    2.0 * PI.powf(h) / libm::tgamma(h)
}

/// Constant `c_{k,d}` of the addition theorem
/// `Σ_j φ_{k,j}(x) φ_{k,j}(y) = c_{k,d} C_k^(α)(x·y)`, with `α = (d-1)/2`.
pub fn addition_constant(k: usize, d: usize) -> f64 {
    let alpha = (d as f64 - 1.0) / 2.0;
    harmonic_count(k, d) as f64 / (sphere_volume(d) * gegenbauer_at_one(k, alpha))
}

/// Squared `L²((1-t²)^(α-1/2))` norm of `C_n^(α)`.
fn gegenbauer_log_norm(n: usize, alpha: f64) -> f64 {
    let nf = n as f64;
    PI.ln() + (1.0 - 2.0 * alpha) * 2f64.ln() + libm::lgamma(nf + 2.0 * alpha)
        - libm::lgamma(nf + 1.0)
        - (nf + alpha).ln()
        - 2.0 * libm::lgamma(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarmonicKind {
    Scalar,
    Divergence,
    Curl,
}

/// Position of one basis function: degree, index within the degree, and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarmonicIndex {
    pub degree: usize,
    pub order: usize,
    pub kind: HarmonicKind,
}

/// Real orthonormal harmonics on `S_2` from associated Legendre recurrences.
///
/// Ordering is degree-major with orders `-k..=k`; negative orders carry
/// `sin(|m|φ)` and positive orders `cos(mφ)`. No Condon–Shortley phase.
pub fn scalar_harmonics_s2(x: &SpherePoint, kmax: usize) -> Result<Vec<f64>> {
    if x.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            got: x.dim(),
            context: "scalar_harmonics_s2 needs S_2",
        });
    }
    let c = x.coords();
    let ct = c[2].clamp(-1.0, 1.0);
    let st = (c[0] * c[0] + c[1] * c[1]).sqrt();
    let phi = c[1].atan2(c[0]);

    // plm[m][l] = P_l^m(cos θ) for l >= m
    let mut plm = vec![vec![0.0; kmax + 1]; kmax + 1];
    let mut pmm = 1.0;
    for m in 0..=kmax {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * st;
        }
        plm[m][m] = pmm;
        if m < kmax {
            plm[m][m + 1] = ct * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=kmax {
            plm[m][l] = ((2 * l - 1) as f64 * ct * plm[m][l - 1] - (l + m - 1) as f64 * plm[m][l - 2])
                / (l - m) as f64;
        }
    }

    let mut out = Vec::with_capacity((kmax + 1) * (kmax + 1));
    for l in 0..=kmax {
        for signed in -(l as i64)..=(l as i64) {
            let m = signed.unsigned_abs() as usize;
            let mut ratio = 1.0;
            for i in (l - m + 1)..=(l + m) {
                ratio /= i as f64;
            }
            let mut norm = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
            if m > 0 {
                norm *= 2f64.sqrt();
            }
            let angular = match signed.signum() {
                -1 => (m as f64 * phi).sin(),
                0 => 1.0,
                _ => (m as f64 * phi).cos(),
            };
            out.push(norm * plm[m][l] * angular);
        }
    }
    Ok(out)
}

/// Divergence-type `∇φ/√λ` and curl-type `x × ∇φ/√λ` fields for degrees `1..=kmax`,
/// in the ordering of [`scalar_harmonics_s2`] restricted to `k ≥ 1`.
pub fn vector_harmonics_s2(
    x: &SpherePoint,
    kmax: usize,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    if x.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            got: x.dim(),
            context: "vector_harmonics_s2 needs S_2",
        });
    }
    if kmax == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let basis = HarmonicBasis::new(2, kmax)?;
    let (_, grads) = basis.eval_gradient(x.coords().as_slice());
    let xc = x.coords();
    let mut div = Vec::new();
    let mut curl = Vec::new();
    for s2 in basis.s2_order().into_iter().filter(|&i| basis.degree(i) >= 1) {
        let lambda = laplace_eigenvalue(basis.degree(s2), 2);
        let g = DVector::from_column_slice(&grads[3 * s2..3 * s2 + 3]);
        let tangential = &g - xc * xc.dot(&g);
        let v = tangential / lambda.sqrt();
        curl.push(cross(xc, &v));
        div.push(v);
    }
    Ok((div, curl))
}

/// Orthonormal harmonics of degree `≤ kmax` on `S_d` from the recursive
/// Gegenbauer-product construction.
pub fn scalar_harmonics_sd(x: &SpherePoint, kmax: usize) -> Result<Vec<f64>> {
    let basis = HarmonicBasis::new(x.dim(), kmax)?;
    Ok(basis.eval(x.coords().as_slice()))
}

#[derive(Debug, Clone)]
struct Level {
    degree: Vec<usize>,
    parent_degree: Vec<usize>,
    parent: Vec<usize>,
    coef: Vec<f64>,
}

/// Real orthonormal harmonics on `S_d` up to a fixed degree, evaluated as
/// homogeneous polynomials in the ambient coordinates.
///
/// Entry order is degree-major; within a degree, entries are ordered by the
/// degree of the sub-sphere factor and then recursively.
#[derive(Debug, Clone)]
pub struct HarmonicBasis {
    d: usize,
    kmax: usize,
    circle_coef: Vec<(usize, bool, f64)>,
    levels: Vec<Level>,
}

impl HarmonicBasis {
    pub fn new(d: usize, kmax: usize) -> Result<Self> {
        if d < 2 || d + 1 > MAX_EMBEDDING_DIM {
            return Err(Error::UnsupportedDimension {
                got: d,
                context: "harmonic basis supports 2 <= d <= 11",
            });
        }
        // circle: (degree, is_sin, coef), degree-major with cos before sin
        let mut circle_coef = vec![(0, false, 1.0 / (2.0 * PI).sqrt())];
        for j in 1..=kmax {
            circle_coef.push((j, false, 1.0 / PI.sqrt()));
            circle_coef.push((j, true, 1.0 / PI.sqrt()));
        }
        let mut prev_degrees: Vec<usize> = circle_coef.iter().map(|c| c.0).collect();
        let mut levels = Vec::new();
        for m in 2..=d {
            let mut level = Level {
                degree: Vec::new(),
                parent_degree: Vec::new(),
                parent: Vec::new(),
                coef: Vec::new(),
            };
            for k in 0..=kmax {
                for j in 0..=k {
                    let alpha = j as f64 + (m as f64 - 1.0) / 2.0;
                    let coef = (-0.5 * gegenbauer_log_norm(k - j, alpha)).exp();
                    for (p, &pd) in prev_degrees.iter().enumerate() {
                        if pd == j {
                            level.degree.push(k);
                            level.parent_degree.push(j);
                            level.parent.push(p);
                            level.coef.push(coef);
                        }
                    }
                }
            }
            prev_degrees = level.degree.clone();
            levels.push(level);
        }
        Ok(Self {
            d,
            kmax,
            circle_coef,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn max_degree(&self) -> usize {
        self.kmax
    }

    pub fn len(&self) -> usize {
        self.levels.last().map_or(0, |l| l.degree.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn degree(&self, i: usize) -> usize {
        self.levels.last().expect("d >= 2").degree[i]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.levels.last().expect("d >= 2").degree
    }

    pub fn index(&self, i: usize) -> HarmonicIndex {
        let degree = self.degree(i);
        let first = self.degrees().iter().position(|&k| k == degree).unwrap_or(0);
        HarmonicIndex {
            degree,
            order: i - first,
            kind: HarmonicKind::Scalar,
        }
    }

    /// On `S_2`: the permutation listing basis entries in the `-k..=k` order of
    /// [`scalar_harmonics_s2`].
    pub fn s2_order(&self) -> Vec<usize> {
        assert_eq!(self.d, 2, "s2_order is defined on S_2 only");
        let level = &self.levels[0];
        let mut order = Vec::with_capacity(self.len());
        for k in 0..=self.kmax {
            let find = |j: usize, sin: bool| {
                (0..level.degree.len())
                    .find(|&i| {
                        level.degree[i] == k
                            && level.parent_degree[i] == j
                            && self.circle_coef[level.parent[i]].1 == sin
                    })
                    .expect("complete basis")
            };
            for j in (1..=k).rev() {
                order.push(find(j, true));
            }
            order.push(find(0, false));
            for j in 1..=k {
                order.push(find(j, false));
            }
        }
        order
    }

    pub(crate) fn evaluate<T: Field>(&self, coords: &[T]) -> Vec<T> {
        debug_assert_eq!(coords.len(), self.d + 1);
        let (x1, x2) = (coords[0], coords[1]);
        let mut powers = Vec::with_capacity(self.kmax + 1);
        let (mut re, mut im) = (T::constant(1.0), T::constant(0.0));
        powers.push((re, im));
        for _ in 1..=self.kmax {
            let next_re = re * x1 - im * x2;
            let next_im = re * x2 + im * x1;
            re = next_re;
            im = next_im;
            powers.push((re, im));
        }
        let mut prev: Vec<T> = self
            .circle_coef
            .iter()
            .map(|&(j, sin, c)| if sin { powers[j].1 * c } else { powers[j].0 * c })
            .collect();

        let mut r2 = x1 * x1 + x2 * x2;
        for (li, level) in self.levels.iter().enumerate() {
            let m = li + 2;
            let t = coords[m];
            r2 = r2 + t * t;
            // q[j][n] = r^n C_n^(α_j)(t / r)
            let q: Vec<Vec<T>> = (0..=self.kmax)
                .map(|j| {
                    let alpha = j as f64 + (m as f64 - 1.0) / 2.0;
                    homogeneous_gegenbauer(self.kmax - j, alpha, t, r2)
                })
                .collect();
            prev = (0..level.degree.len())
                .map(|i| {
                    let j = level.parent_degree[i];
                    q[j][level.degree[i] - j] * prev[level.parent[i]] * level.coef[i]
                })
                .collect();
        }
        prev
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.evaluate(x)
    }

    /// Values and ambient gradients (row-major `len × (d+1)`).
    pub fn eval_gradient(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        macro_rules! run {
            ($n:literal) => {{
                let coords: Vec<Jet1<$n>> = (0..$n).map(|i| Jet1::variable(x[i], i)).collect();
                let jets = self.evaluate(&coords);
                let mut values = Vec::with_capacity(jets.len());
                let mut grads = Vec::with_capacity(jets.len() * $n);
                for j in jets {
                    values.push(j.v);
                    grads.extend_from_slice(&j.g);
                }
                (values, grads)
            }};
        }
        match x.len() {
            3 => run!(3),
            4 => run!(4),
            5 => run!(5),
            6 => run!(6),
            7 => run!(7),
            8 => run!(8),
            9 => run!(9),
            10 => run!(10),
            11 => run!(11),
            12 => run!(12),
            n => unreachable!("embedding dimension {n} rejected at construction"),
        }
    }

    /// Values, gradients and Hessians on `S_2` (Hessians row-major `len × 9`).
    pub fn eval_hessian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        assert_eq!(x.len(), 3, "second derivatives are only needed on S_2");
        let coords: Vec<Jet2<3>> = (0..3).map(|i| Jet2::variable(x[i], i)).collect();
        let jets = self.evaluate(&coords);
        let mut values = Vec::with_capacity(jets.len());
        let mut grads = Vec::with_capacity(jets.len() * 3);
        let mut hess = Vec::with_capacity(jets.len() * 9);
        for j in jets {
            values.push(j.v);
            grads.extend_from_slice(&j.g);
            for row in j.h {
                hess.extend_from_slice(&row);
            }
        }
        (values, grads, hess)
    }
}

fn homogeneous_gegenbauer<T: Field>(nmax: usize, alpha: f64, t: T, r2: T) -> Vec<T> {
    let mut out = Vec::with_capacity(nmax + 1);
    out.push(T::constant(1.0));
    if nmax >= 1 {
        out.push(t * (2.0 * alpha));
    }
    for n in 2..=nmax {
        let nf = n as f64;
        let next = (t * out[n - 1] * (2.0 * (nf - 1.0 + alpha)) - r2 * out[n - 2] * (nf - 2.0 + 2.0 * alpha))
            * (1.0 / nf);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::random_point;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gegenbauer_examples() {
        assert_eq!(gegenbauer(0, 1.7, 0.3).unwrap(), (1.0, 0.0, 0.0));
        assert!((gegenbauer(1, 0.5, 0.3).unwrap().0 - 0.3).abs() < 1e-15);
        assert!((gegenbauer(3, 0.5, 1.0).unwrap().0 - 1.0).abs() < 1e-14);
        // closed form at 1: binom(k + 2α - 1, k)
        assert!((gegenbauer(4, 1.5, 1.0).unwrap().0 - 15.0).abs() < 1e-12);
        assert!((gegenbauer_at_one(4, 1.5) - 15.0).abs() < 1e-12);
        assert!(gegenbauer(2, 0.5, 1.0 + 1e-10).is_ok());
        assert!(matches!(gegenbauer(2, 0.5, 1.01), Err(Error::Domain { .. })));
    }

    #[test]
    fn gegenbauer_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for &alpha in &[0.5, 1.0, 1.5] {
            for k in 0..=12 {
                for _ in 0..50 {
                    let t: f64 = rand::Rng::random_range(&mut rng, -0.99..0.99);
                    let (_, d1, d2) = gegenbauer(k, alpha, t).unwrap();
                    let f = |s: f64| gegenbauer_value(k, alpha, s);
                    let stencil = |u: &dyn Fn(f64) -> f64| {
                        (-u(t + 2.0 * h) + 8.0 * u(t + h) - 8.0 * u(t - h) + u(t - 2.0 * h)) / (12.0 * h)
                    };
                    let fd1 = stencil(&f);
                    let g = |s: f64| gegenbauer(k, alpha, s).unwrap().1;
                    let fd2 = stencil(&g);
                    let scale1 = d1.abs().max(1.0);
                    let scale2 = d2.abs().max(1.0);
                    assert!((d1 - fd1).abs() / scale1 < 1e-6, "k={k} α={alpha} t={t}");
                    assert!((d2 - fd2).abs() / scale2 < 1e-6, "k={k} α={alpha} t={t}");
                }
            }
        }
    }

    #[test]
    fn counts_match_paper_feature_budgets() {
        assert_eq!(harmonic_count(0, 2), 1);
        assert_eq!(harmonic_count(0, 5), 1);
        assert_eq!((0..=6).map(|k| harmonic_count(k, 2)).sum::<usize>(), 49);
        assert_eq!(2 * (1..=5).map(|k| harmonic_count(k, 2)).sum::<usize>(), 70);
        assert_eq!(2 * (1..=9).map(|k| harmonic_count(k, 2)).sum::<usize>(), 198);
        for k in 0..10 {
            assert_eq!(harmonic_count(k, 2), 2 * k + 1);
        }
        // S_3: (k+1)^2
        for k in 0..8 {
            assert_eq!(harmonic_count(k, 3), (k + 1) * (k + 1));
        }
    }

    #[test]
    fn basis_sizes_match_counts() {
        for d in 2..=6 {
            for kmax in 0..=5 {
                let b = HarmonicBasis::new(d, kmax).unwrap();
                assert_eq!(b.len(), harmonic_total(kmax, d), "d={d} K={kmax}");
            }
        }
    }

    #[test]
    fn constant_harmonic_value() {
        let x = SpherePoint::from_spherical(0.4, 1.1);
        let v = scalar_harmonics_s2(&x, 0).unwrap();
        assert!((v[0] - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-15);
        for d in 2..=5 {
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            let x = random_point(d, &mut rng);
            let v = scalar_harmonics_sd(&x, 0).unwrap();
            assert!((v[0] - sphere_volume(d).recip().sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn s2_constructions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = HarmonicBasis::new(2, 10).unwrap();
        let order = basis.s2_order();
        for _ in 0..50 {
            let x = random_point(2, &mut rng);
            let legendre = scalar_harmonics_s2(&x, 10).unwrap();
            let cartesian = basis.eval(x.coords().as_slice());
            for (i, &j) in order.iter().enumerate() {
                assert!((legendre[i] - cartesian[j]).abs() < 1e-12, "index {i}");
            }
        }
    }

    #[test]
    fn addition_theorem_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [2usize, 3, 4] {
            let basis = HarmonicBasis::new(d, 8).unwrap();
            let alpha = (d as f64 - 1.0) / 2.0;
            for _ in 0..100 {
                let x = random_point(d, &mut rng);
                let y = random_point(d, &mut rng);
                let fx = basis.eval(x.coords().as_slice());
                let fy = basis.eval(y.coords().as_slice());
                for k in 0..=8 {
                    let lhs: f64 = (0..basis.len())
                        .filter(|&i| basis.degree(i) == k)
                        .map(|i| fx[i] * fy[i])
                        .sum();
                    let rhs = addition_constant(k, d) * gegenbauer_value(k, alpha, x.dot(&y));
                    assert!((lhs - rhs).abs() < 1e-10, "d={d} k={k}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn degree_sums_are_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reference: Option<Vec<f64>> = None;
        for _ in 0..20 {
            let x = random_point(2, &mut rng);
            let v = scalar_harmonics_s2(&x, 6).unwrap();
            let sums: Vec<f64> = (0..=6)
                .map(|k| v[k * k..(k + 1) * (k + 1)].iter().map(|a| a * a).sum())
                .collect();
            match &reference {
                None => reference = Some(sums),
                Some(r) => {
                    for (a, b) in r.iter().zip(&sums) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn monte_carlo_gram_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 100_000;
        let kmax = 3;
        let size = (kmax + 1) * (kmax + 1);
        let mut gram = DMatrix::<f64>::zeros(size, size);
        for _ in 0..n {
            let x = random_point(2, &mut rng);
            let v = DVector::from_vec(scalar_harmonics_s2(&x, kmax).unwrap());
            gram += &v * v.transpose();
        }
        gram *= 4.0 * PI / n as f64;
        let err = (gram - DMatrix::identity(size, size)).abs().max();
        assert!(err < 2e-2, "max entry error {err}");
    }

    #[test]
    fn harmonics_are_eigenfunctions_on_s3() {
        // degree-0 homogeneous extension F(x) = φ(x/|x|) satisfies Δ_R^D F = Δ_S φ on |x| = 1
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (k, d) in [(1usize, 2usize), (2, 3), (3, 3)] {
            let basis = HarmonicBasis::new(d, k).unwrap();
            let idx = (0..basis.len()).find(|&i| basis.degree(i) == k).unwrap();
            let f = |p: &DVector<f64>| {
                let u = p / p.norm();
                basis.eval(u.as_slice())[idx]
            };
            let h = 1e-3;
            let mut num = 0.0;
            let mut den = 0.0;
            for _ in 0..20 {
                let x = random_point(d, &mut rng).into_coords();
                let mut lap = 0.0;
                for a in 0..=d {
                    let mut e = DVector::zeros(d + 1);
                    e[a] = h;
                    lap += (f(&(&x + &e)) - 2.0 * f(&x) + f(&(&x - &e))) / (h * h);
                }
                num += -lap * f(&x);
                den += f(&x) * f(&x);
            }
            let fitted = num / den;
            let expected = laplace_eigenvalue(k, d);
            assert!((fitted - expected).abs() / expected < 1e-2, "k={k} d={d}: {fitted}");
        }
    }

    #[test]
    fn latlon_laplacian_recovers_eigenvalues() {
        let basis = HarmonicBasis::new(2, 4).unwrap();
        let h = 1e-3;
        for i in 0..basis.len() {
            let k = basis.degree(i);
            let f = |th: f64, ph: f64| basis.eval(SpherePoint::from_spherical(th, ph).coords().as_slice())[i];
            let mut num = 0.0;
            let mut den = 0.0;
            for a in 1..12 {
                for b in 0..16 {
                    let th = PI * a as f64 / 12.0;
                    let ph = 2.0 * PI * b as f64 / 16.0 + 0.1;
                    let s = th.sin();
                    let d_th = ((th + h / 2.0).sin() * (f(th + h, ph) - f(th, ph))
                        - (th - h / 2.0).sin() * (f(th, ph) - f(th - h, ph)))
                        / (h * h * s);
                    let d_ph = (f(th, ph + h) - 2.0 * f(th, ph) + f(th, ph - h)) / (h * h * s * s);
                    let v = f(th, ph);
                    num += -(d_th + d_ph) * v;
                    den += v * v;
                }
            }
            if k == 0 {
                assert!(num.abs() / den < 1e-3);
            } else {
                let lambda = laplace_eigenvalue(k, 2);
                assert!(((num / den) - lambda).abs() / lambda < 1e-2, "index {i}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for d in [2usize, 3, 5] {
            let basis = HarmonicBasis::new(d, 4).unwrap();
            let x = random_point(d, &mut rng).into_coords();
            let (v, g) = basis.eval_gradient(x.as_slice());
            assert_eq!(v, basis.eval(x.as_slice()));
            let h = 1e-6;
            for a in 0..=d {
                let mut xp = x.clone();
                xp[a] += h;
                let mut xm = x.clone();
                xm[a] -= h;
                let fp = basis.eval(xp.as_slice());
                let fm = basis.eval(xm.as_slice());
                for i in 0..basis.len() {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!((fd - g[i * (d + 1) + a]).abs() < 1e-7);
                }
            }
        }
        let basis = HarmonicBasis::new(2, 5).unwrap();
        let x = random_point(2, &mut rng).into_coords();
        let (_, g, hs) = basis.eval_hessian(x.as_slice());
        let h = 1e-6;
        for a in 0..3 {
            let mut xp = x.clone();
            xp[a] += h;
            let mut xm = x.clone();
            xm[a] -= h;
            let (_, gp) = basis.eval_gradient(xp.as_slice());
            let (_, gm) = basis.eval_gradient(xm.as_slice());
            for i in 0..basis.len() {
                for b in 0..3 {
                    let fd = (gp[3 * i + b] - gm[3 * i + b]) / (2.0 * h);
                    assert!((fd - hs[9 * i + 3 * b + a]).abs() < 1e-6);
                }
            }
        }
        assert_eq!(g.len(), 3 * basis.len());
    }

    #[test]
    fn vector_harmonics_counts_and_tangency() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_point(2, &mut rng);
        let (div, curl) = vector_harmonics_s2(&x, 5).unwrap();
        assert_eq!((div.len(), curl.len()), (35, 35));
        let (div, curl) = vector_harmonics_s2(&x, 9).unwrap();
        assert_eq!(div.len() + curl.len(), 198);
        for v in div.iter().chain(&curl) {
            assert!(v.dot(x.coords()).abs() < 1e-10);
        }
        let (div, curl) = vector_harmonics_s2(&x, 0).unwrap();
        assert!(div.is_empty() && curl.is_empty());
    }

    #[test]
    fn div_and_curl_fields_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let kmax = 2;
        let count = 8;
        let mut cross_gram = DMatrix::<f64>::zeros(count, count);
        let mut div_gram = DMatrix::<f64>::zeros(count, count);
        for _ in 0..n {
            let x = random_point(2, &mut rng);
            let (div, curl) = vector_harmonics_s2(&x, kmax).unwrap();
            for a in 0..count {
                for b in 0..count {
                    cross_gram[(a, b)] += div[a].dot(&curl[b]);
                    div_gram[(a, b)] += div[a].dot(&div[b]);
                }
            }
        }
        cross_gram *= 4.0 * PI / n as f64;
        div_gram *= 4.0 * PI / n as f64;
        assert!(cross_gram.abs().max() < 2e-2);
        assert!((div_gram - DMatrix::identity(count, count)).abs().max() < 3e-2);
    }
}
