//! Euclidean inputs lifted onto a sphere by appending a bias coordinate.

use nalgebra::DVector;
use resdgp::sphere::SpherePoint;

/// `(x, b) / ‖(x, b)‖` on `S_d` for `x ∈ R^d`.
pub fn embed_euclidean(x: &[f64], bias: f64) -> resdgp::Result<SpherePoint> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.extend_from_slice(x);
    v.push(bias);
    SpherePoint::normalize(DVector::from_vec(v))
}

/// Per-feature mean and standard deviation; constant features get unit scale.
pub fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let p = embed_euclidean(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.coords().as_slice(), &[0.0, 0.0, 1.0]);
        let q = embed_euclidean(&[1.0, 0.0], 1.0).unwrap();
        let r = 1.0 / 2f64.sqrt();
        for (a, b) in q.coords().iter().zip([r, 0.0, r]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(embed_euclidean(&[0.0, 0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn unit_norm(x in prop::collection::vec(-1e3f64..1e3, 1..6)) {
            let p = embed_euclidean(&x, 1.0).unwrap();
            prop_assert!((p.coords().norm() - 1.0).abs() < 1e-12);
            prop_assert_eq!(p.dim(), x.len());
        }
    }
}
