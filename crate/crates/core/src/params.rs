//! Flat parameter registry with positivity and Cholesky-factor transforms.
//!
//! Models keep their parameters as one constrained vector; the store holds the
//! matching unconstrained vector that the optimiser updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `c = floor + softplus(u)`.
    Softplus { floor: f64 },
    /// Packed row-major lower triangle of an `n × n` factor; the diagonal goes through softplus.
    CholeskyFactor { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
    pub trainable: bool,
}

pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else if u < -30.0 {
        u.exp()
    } else {
        u.exp().ln_1p()
    }
}

/// Derivative of softplus, the logistic function.
pub fn softplus_grad(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub fn softplus_inverse(c: f64) -> f64 {
    if c > 30.0 {
        c
    } else {
        // ln(e^c - 1) written to stay accurate for small c
        c + (-(-c).exp()).ln_1p()
    }
}

/// Index of `(i, j)`, `j ≤ i`, in a packed row-major lower triangle.
pub fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

impl Transform {
    fn forward(&self, u: &[f64], out: &mut [f64]) {
        match *self {
            Transform::Identity => out.copy_from_slice(u),
            Transform::Softplus { floor } => {
                for (o, &v) in out.iter_mut().zip(u) {
                    *o = floor + softplus(v);
                }
            }
            Transform::CholeskyFactor { n } => {
                for i in 0..n {
                    for j in 0..=i {
                        let p = packed_index(i, j);
                        out[p] = if i == j { softplus(u[p]) } else { u[p] };
                    }
                }
            }
        }
    }

    pub(crate) fn inverse(&self, c: &[f64], out: &mut [f64]) -> Result<()> {
        match *self {
            Transform::Identity => out.copy_from_slice(c),
            Transform::Softplus { floor } => {
                for (o, &v) in out.iter_mut().zip(c) {
                    if !(v > floor) {
                        return Err(Error::Domain {
                            function: "softplus inverse",
                            value: v,
                        });
                    }
                    *o = softplus_inverse(v - floor);
                }
            }
            Transform::CholeskyFactor { n } => {
                for i in 0..n {
                    for j in 0..=i {
                        let p = packed_index(i, j);
                        if i == j {
                            if !(c[p] > 0.0) {
                                return Err(Error::Domain {
                                    function: "cholesky factor diagonal",
                                    value: c[p],
                                });
                            }
                            out[p] = softplus_inverse(c[p]);
                        } else {
                            out[p] = c[p];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn chain(&self, u: &[f64], g: &[f64], out: &mut [f64]) {
        match *self {
            Transform::Identity => out.copy_from_slice(g),
            Transform::Softplus { .. } => {
                for ((o, &v), &gc) in out.iter_mut().zip(u).zip(g) {
                    *o = gc * softplus_grad(v);
                }
            }
            Transform::CholeskyFactor { n } => {
                for i in 0..n {
                    for j in 0..=i {
                        let p = packed_index(i, j);
                        out[p] = if i == j { g[p] * softplus_grad(u[p]) } else { g[p] };
                    }
                }
            }
        }
    }
}

/// Builds a constrained vector and its entry table in one pass.
#[derive(Debug, Clone, Default)]
pub struct ParamBuilder {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParamBuilder {
    pub fn push(&mut self, name: impl Into<String>, values: &[f64], transform: Transform, trainable: bool) -> usize {
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.entries.push(ParamEntry {
            name: name.into(),
            offset,
            len: values.len(),
            transform,
            trainable,
        });
        offset
    }
}

/// Unconstrained parameter vector plus the transforms that produce model values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub unconstrained: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParameterStore {
    pub fn from_constrained(entries: Vec<ParamEntry>, constrained: &[f64]) -> Result<Self> {
        let mut unconstrained = vec![0.0; constrained.len()];
        for e in &entries {
            let r = e.offset..e.offset + e.len;
            e.transform.inverse(&constrained[r.clone()], &mut unconstrained[r])?;
        }
        Ok(Self { unconstrained, entries })
    }

    pub fn len(&self) -> usize {
        self.unconstrained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unconstrained.is_empty()
    }

    pub fn constrained(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.unconstrained.len()];
        for e in &self.entries {
            let r = e.offset..e.offset + e.len;
            e.transform.forward(&self.unconstrained[r.clone()], &mut out[r]);
        }
        out
    }

    /// Chain rule from constrained to unconstrained coordinates; frozen entries get zero.
    pub fn chain_gradient(&self, constrained_grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.unconstrained.len()];
        for e in &self.entries {
            if !e.trainable {
                continue;
            }
            let r = e.offset..e.offset + e.len;
            e.transform
                .chain(&self.unconstrained[r.clone()], &constrained_grad[r.clone()], &mut out[r]);
        }
        out
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Name of the entry containing flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.entries
            .iter()
            .find(|e| i >= e.offset && i < e.offset + e.len)
            .map_or("?", |e| e.name.as_str())
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for e in &self.entries {
            for m in &mut mask[e.offset..e.offset + e.len] {
                *m = e.trainable;
            }
        }
        mask
    }
}
