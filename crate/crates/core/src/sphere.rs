//! Embedded hypersphere primitives.
//!
//! Points of `S_d` are stored as unit vectors of `R^{d+1}`; tangent vectors are
//! ambient vectors orthogonal to their base point.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance on `|‖x‖ - 1|` accepted by [`SpherePoint::new`].
pub const UNIT_TOLERANCE: f64 = 1e-12;

/// Below this norm `exp_map` returns its base point unchanged.
pub const EXP_SMALL_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    coords: DVector<f64>,
}

impl SpherePoint {
    /// Wraps an existing unit vector, rejecting anything off the sphere.
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        let norm = coords.norm();
        if coords.len() < 2 || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnit(norm));
        }
        Ok(Self { coords })
    }

    /// Normalises an arbitrary nonzero vector onto the sphere.
    pub fn normalize(coords: DVector<f64>) -> Result<Self> {
        let norm = coords.norm();
        if coords.len() < 2 || norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            coords: coords / norm,
        })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(coords))
    }

    /// Point with the given colatitude and longitude on `S_2`.
    pub fn from_spherical(colatitude: f64, longitude: f64) -> Self {
        let (st, ct) = colatitude.sin_cos();
        let (sp, cp) = longitude.sin_cos();
        Self {
            coords: DVector::from_vec(vec![st * cp, st * sp, ct]),
        }
    }

    /// North pole `(0, …, 0, 1)` of `S_d`.
    pub fn north_pole(d: usize) -> Self {
        let mut coords = DVector::zeros(d + 1);
        coords[d] = 1.0;
        Self { coords }
    }

    pub(crate) fn from_unit_unchecked(coords: DVector<f64>) -> Self {
        Self { coords }
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }

    /// Intrinsic dimension `d` of the sphere the point lives on.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn dot(&self, other: &SpherePoint) -> f64 {
        self.coords.dot(&other.coords)
    }

    /// `(colatitude, longitude)` on `S_2`.
    pub fn spherical(&self) -> (f64, f64) {
        let c = &self.coords;
        (c[2].clamp(-1.0, 1.0).acos(), c[1].atan2(c[0]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: SpherePoint,
    pub vec: DVector<f64>,
}

impl TangentVector {
    pub fn new(base: SpherePoint, vec: DVector<f64>) -> Result<Self> {
        if vec.len() != base.coords.len() {
            return Err(Error::DimensionMismatch {
                expected: base.coords.len(),
                got: vec.len(),
            });
        }
        Ok(Self { base, vec })
    }

    pub fn zero(base: SpherePoint) -> Self {
        let vec = DVector::zeros(base.coords.len());
        Self { base, vec }
    }

    pub fn norm(&self) -> f64 {
        self.vec.norm()
    }

    /// `|⟨v, x⟩| / max(‖v‖, 1)`, a scale-aware tangency defect.
    pub fn tangency_defect(&self) -> f64 {
        self.vec.dot(&self.base.coords).abs() / self.vec.norm().max(1.0)
    }
}

/// Exponential map of the unit sphere: `cos‖v‖ x + sin‖v‖ v/‖v‖`.
pub fn exp_map(x: &SpherePoint, v: &TangentVector) -> SpherePoint {
    let n = v.vec.norm();
    if n < EXP_SMALL_NORM {
        return x.clone();
    }
    let y = &x.coords * n.cos() + &v.vec * (n.sin() / n);
    // renormalise away the O(eps) drift of the trigonometric evaluation
    let norm = y.norm();
    SpherePoint::from_unit_unchecked(y / norm)
}

/// Orthogonal projection `(I - x xᵀ) h` onto `T_x S_d`.
pub fn tangent_project(x: &SpherePoint, h: &DVector<f64>) -> TangentVector {
    let vec = h - &x.coords * x.coords.dot(h);
    TangentVector {
        base: x.clone(),
        vec,
    }
}

/// Rotation by a right angle inside `T_x S_2` (`x × v`).
pub fn rotate90(v: &TangentVector) -> Result<TangentVector> {
    if v.base.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            got: v.base.dim(),
            context: "rotate90 is defined on S_2 only",
        });
    }
    Ok(TangentVector {
        base: v.base.clone(),
        vec: cross(&v.base.coords, &v.vec),
    })
}

pub(crate) fn cross(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])
}

/// Near-uniform Fibonacci lattice on `S_2`.
///
/// Point `i` sits at colatitude `arccos(1 - (2i+1)/n)` and longitude `2πi/φ`.
pub fn fibonacci_lattice(n: usize) -> Result<Vec<SpherePoint>> {
    if n == 0 {
        return Err(Error::EmptyLattice);
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    Ok((0..n)
        .map(|i| {
            let colat = (1.0 - (2 * i + 1) as f64 / n as f64).acos();
            let lon = (2.0 * PI * i as f64 / golden).rem_euclid(2.0 * PI);
            SpherePoint::from_spherical(colat, lon)
        })
        .collect())
}

/// Great-circle distance `arccos⟨x, y⟩`, evaluated as `2·atan2(‖x−y‖, ‖x+y‖)`
/// to stay accurate near `0` and `π`.
pub fn geodesic_distance(x: &SpherePoint, y: &SpherePoint) -> f64 {
    let diff = (&x.coords - &y.coords).norm();
    let sum = (&x.coords + &y.coords).norm();
    2.0 * diff.atan2(sum)
}

/// One Riemannian gradient-descent step: project `-step·grad` and retract with `exp_map`.
pub fn riemannian_gradient_step(
    x: &SpherePoint,
    euclid_grad: &DVector<f64>,
    step: f64,
) -> Result<SpherePoint> {
    if !(step > 0.0) {
        return Err(Error::Domain {
            function: "riemannian_gradient_step",
            value: step,
        });
    }
    let v = tangent_project(x, &(euclid_grad * -step));
    Ok(exp_map(x, &v))
}

/// Orthonormal basis of `T_x S_d` as the columns of a `(d+1) × d` matrix.
///
/// Built from the Householder reflection sending `∓e_D` to `x`, so it is
/// smooth on each open hemisphere `x_D > 0`, `x_D < 0`.
pub fn tangent_basis(x: &DVector<f64>) -> DMatrix<f64> {
    let dim = x.len();
    let last = dim - 1;
    let sign = if x[last] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = x.clone();
    v[last] += sign;
    let vv = v.norm_squared();
    let mut basis = DMatrix::zeros(dim, last);
    for j in 0..last {
        for i in 0..dim {
            let delta = if i == j { 1.0 } else { 0.0 };
            basis[(i, j)] = delta - 2.0 * v[i] * v[j] / vv;
        }
    }
    basis
}

/// Uniformly distributed random point on `S_d`.
pub fn random_point<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SpherePoint {
    loop {
        let v = DVector::from_fn(d + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Ok(p) = SpherePoint::normalize(v) {
            return p;
        }
    }
}

/// Lloyd's k-means in the embedding space; centroids are renormalised onto the sphere.
pub fn spherical_kmeans(
    points: &[SpherePoint],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<SpherePoint>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidCount(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].coords.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<DVector<f64>> = sample(&mut rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].coords.clone())
        .collect();
    let mut assignment = vec![usize::MAX; points.len()];

    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = nearest(&centroids, &p.coords);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assignment[i]] += &p.coords;
            counts[assignment[i]] += 1;
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                centroids[c] = points[rng.random_range(0..points.len())].coords.clone();
                reseeded = true;
            } else {
                centroids[c] = &sums[c] / counts[c] as f64;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }

    centroids
        .into_iter()
        .map(|c| match SpherePoint::normalize(c) {
            Ok(p) => Ok(p),
            // mean of a perfectly antipodal cluster; fall back to a data point
            Err(_) => Ok(points[rng.random_range(0..points.len())].clone()),
        })
        .collect()
}

fn nearest(centroids: &[DVector<f64>], p: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let dist = (c - p).norm_squared();
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn p(v: &[f64]) -> SpherePoint {
        SpherePoint::normalize(DVector::from_column_slice(v)).unwrap()
    }

    fn tv(base: &SpherePoint, v: &[f64]) -> TangentVector {
        TangentVector::new(base.clone(), DVector::from_column_slice(v)).unwrap()
    }

    fn close(a: &DVector<f64>, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn exp_map_examples() {
        let n = p(&[0.0, 0.0, 1.0]);
        assert_eq!(exp_map(&n, &tv(&n, &[0.0, 0.0, 0.0])), n);
        let q = exp_map(&n, &tv(&n, &[PI / 2.0, 0.0, 0.0]));
        assert!(close(q.coords(), &[1.0, 0.0, 0.0], 1e-15));
        let s = exp_map(&n, &tv(&n, &[PI, 0.0, 0.0]));
        assert!(close(s.coords(), &[0.0, 0.0, -1.0], 1e-15));
    }

    #[test]
    fn projection_examples() {
        let n = p(&[0.0, 0.0, 1.0]);
        let h = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
        assert!(close(&tangent_project(&n, &h).vec, &[0.0, 0.0, 0.0], 0.0));
        let h = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        assert!(close(&tangent_project(&n, &h).vec, &[1.0, 0.0, 0.0], 0.0));
        let x = p(&[1.0, 0.0, 1.0]);
        assert!(close(&tangent_project(&x, &h).vec, &[0.5, 0.0, -0.5], 1e-15));
    }

    #[test]
    fn rotate90_examples() {
        let n = p(&[0.0, 0.0, 1.0]);
        assert!(close(&rotate90(&tv(&n, &[1.0, 0.0, 0.0])).unwrap().vec, &[0.0, 1.0, 0.0], 0.0));
        assert!(close(&rotate90(&tv(&n, &[0.0, 1.0, 0.0])).unwrap().vec, &[-1.0, 0.0, 0.0], 0.0));
        let x3 = p(&[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            rotate90(&TangentVector::zero(x3)),
            Err(Error::UnsupportedDimension { got: 3, .. })
        ));
    }

    #[test]
    fn fibonacci_examples() {
        assert_eq!(fibonacci_lattice(0), Err(Error::EmptyLattice));
        let one = fibonacci_lattice(1).unwrap();
        assert!((one[0].spherical().0 - PI / 2.0).abs() < 1e-15);
        let two = fibonacci_lattice(2).unwrap();
        assert!((two[0].spherical().0 - PI / 3.0).abs() < 1e-15);
        for x in fibonacci_lattice(500).unwrap() {
            assert!((x.coords().norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn fibonacci_covers_sphere_evenly() {
        let pts = fibonacci_lattice(2000).unwrap();
        let mean: DVector<f64> = pts.iter().fold(DVector::zeros(3), |acc, x| acc + x.coords()) / 2000.0;
        assert!(mean.norm() < 1e-2);
    }

    #[test]
    fn geodesic_examples() {
        let n = p(&[0.0, 0.0, 1.0]);
        assert_eq!(geodesic_distance(&n, &n), 0.0);
        assert!((geodesic_distance(&n, &p(&[1.0, 0.0, 0.0])) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_step_examples() {
        let n = p(&[0.0, 0.0, 1.0]);
        let grad = DVector::from_column_slice(&[0.0, 0.0, 3.0]);
        assert_eq!(riemannian_gradient_step(&n, &grad, 0.7).unwrap(), n);
        let grad = DVector::from_column_slice(&[-1.0, 0.0, 0.0]);
        let y = riemannian_gradient_step(&n, &grad, PI / 2.0).unwrap();
        assert!(close(y.coords(), &[1.0, 0.0, 0.0], 1e-15));
        assert!(riemannian_gradient_step(&n, &grad, 0.0).is_err());
    }

    #[test]
    fn tangent_basis_is_orthonormal_and_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 2..6 {
            for _ in 0..20 {
                let x = random_point(d, &mut rng);
                let b = tangent_basis(x.coords());
                let gram = b.transpose() * &b;
                assert!((gram - DMatrix::identity(d, d)).abs().max() < 1e-13);
                assert!((b.transpose() * x.coords()).abs().max() < 1e-13);
            }
        }
    }

    #[test]
    fn kmeans_examples() {
        let pts = fibonacci_lattice(12).unwrap();
        let mut c = spherical_kmeans(&pts, 12, 10, 1).unwrap();
        let key = |v: &SpherePoint| (v.coords()[2] * 1e9) as i64;
        c.sort_by_key(key);
        let mut expect = pts.clone();
        expect.sort_by_key(key);
        for (a, b) in c.iter().zip(&expect) {
            assert!((a.coords() - b.coords()).norm() < 1e-12);
        }
        let same = vec![p(&[1.0, 2.0, 3.0]); 5];
        let c = spherical_kmeans(&same, 1, 5, 0).unwrap();
        assert!((c[0].coords() - same[0].coords()).norm() < 1e-14);
        assert!(spherical_kmeans(&same, 6, 5, 0).is_err());
    }

    #[test]
    fn kmeans_separates_antipodal_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centre = p(&[1.0, 2.0, -0.5]);
        let mut pts = Vec::new();
        for sign in [1.0, -1.0] {
            for _ in 0..10 {
                let jitter = DVector::from_fn(3, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
                pts.push(SpherePoint::normalize(centre.coords() * sign + jitter).unwrap());
            }
        }
        // brute force over all 2-partitions: the optimal split is by sign of ⟨x, centre⟩
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 20) - 1 {
            let mut sums = [DVector::zeros(3), DVector::zeros(3)];
            let mut counts = [0.0; 2];
            for (i, x) in pts.iter().enumerate() {
                let g = ((mask >> i) & 1) as usize;
                sums[g] += x.coords();
                counts[g] += 1.0;
            }
            let mut cost = 0.0;
            for (i, x) in pts.iter().enumerate() {
                let g = ((mask >> i) & 1) as usize;
                cost += (x.coords() - &sums[g] / counts[g]).norm_squared();
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        let mut oracle = Vec::new();
        for g in 0..2 {
            let sum: DVector<f64> = pts
                .iter()
                .enumerate()
                .filter(|(i, _)| ((best.1 >> i) & 1) as usize == g)
                .fold(DVector::zeros(3), |acc, (_, x)| acc + x.coords());
            oracle.push(SpherePoint::normalize(sum).unwrap());
        }
        let c = spherical_kmeans(&pts, 2, 50, 4).unwrap();
        for o in &oracle {
            let d = c.iter().map(|x| geodesic_distance(x, o)).fold(f64::INFINITY, f64::min);
            assert!(d < 0.1, "centroid {d} rad from oracle centre");
        }
    }

    fn arb_point(d: usize) -> impl Strategy<Value = SpherePoint> {
        proptest::collection::vec(-1.0f64..1.0, d + 1)
            .prop_filter("nonzero", |v| v.iter().map(|a| a * a).sum::<f64>() > 1e-3)
            .prop_map(|v| SpherePoint::normalize(DVector::from_vec(v)).unwrap())
    }

    proptest! {
        #[test]
        fn exp_is_geodesic(x in arb_point(2), h in proptest::collection::vec(-1.0f64..1.0, 3), len in 0.0f64..PI) {
            let t = tangent_project(&x, &DVector::from_vec(h));
            prop_assume!(t.vec.norm() > 1e-6);
            let v = TangentVector { vec: &t.vec * (len / t.vec.norm()), base: x.clone() };
            let y = exp_map(&x, &v);
            prop_assert!((geodesic_distance(&x, &y) - len).abs() < 1e-10);
        }

        #[test]
        fn exp_stays_on_sphere(x in arb_point(3), h in proptest::collection::vec(-1.0f64..1.0, 4), len in 0.0f64..(10.0 * PI)) {
            let t = tangent_project(&x, &DVector::from_vec(h));
            prop_assume!(t.vec.norm() > 1e-9);
            let v = TangentVector { vec: &t.vec * (len / t.vec.norm()), base: x.clone() };
            prop_assert!((exp_map(&x, &v).coords().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn projection_idempotent(x in arb_point(4), h in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let once = tangent_project(&x, &DVector::from_vec(h));
            let twice = tangent_project(&x, &once.vec);
            prop_assert!((once.vec - twice.vec).abs().max() < 1e-12);
        }

        #[test]
        fn rotate90_properties(x in arb_point(2), h in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let v = tangent_project(&x, &DVector::from_vec(h));
            let r = rotate90(&v).unwrap();
            prop_assert!((r.vec.norm() - v.vec.norm()).abs() < 1e-12);
            prop_assert!(r.vec.dot(&v.vec).abs() < 1e-12);
            prop_assert!(r.vec.dot(x.coords()).abs() < 1e-12);
            let rr = rotate90(&r).unwrap();
            prop_assert!((rr.vec + &v.vec).abs().max() < 1e-12);
        }

        #[test]
        fn gradient_step_stays_on_sphere(x in arb_point(2), g in proptest::collection::vec(-3.0f64..3.0, 3), step in 1e-3f64..2.0) {
            let y = riemannian_gradient_step(&x, &DVector::from_vec(g), step).unwrap();
            prop_assert!((y.coords().norm() - 1.0).abs() < 1e-12);
        }
    }
}
