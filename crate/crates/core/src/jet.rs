//! Truncated Taylor arithmetic used to differentiate polynomial feature maps.
//!
//! `Jet1<N>` carries a value and gradient, `Jet2<N>` adds the Hessian. Both are
//! plain `Copy` structs; the harmonic recurrences are written once over
//! [`Field`] and instantiated for `f64` and the jets.

use std::ops::{Add, Mul, Neg, Sub};

pub trait Field:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self> + Neg<Output = Self>
{
    fn constant(c: f64) -> Self;
}

impl Field for f64 {
    #[inline]
    fn constant(c: f64) -> Self {
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet1<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
}

impl<const N: usize> Jet1<N> {
    /// The `i`-th coordinate function evaluated at `value`.
    pub fn variable(value: f64, i: usize) -> Self {
        let mut g = [0.0; N];
        g[i] = 1.0;
        Self { v: value, g }
    }
}

impl<const N: usize> Field for Jet1<N> {
    #[inline]
    fn constant(c: f64) -> Self {
        Self { v: c, g: [0.0; N] }
    }
}

impl<const N: usize> Add for Jet1<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for i in 0..N {
            self.g[i] += rhs.g[i];
        }
        self
    }
}

impl<const N: usize> Sub for Jet1<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for i in 0..N {
            self.g[i] -= rhs.g[i];
        }
        self
    }
}

impl<const N: usize> Neg for Jet1<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Mul<f64> for Jet1<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, c: f64) -> Self {
        self.v *= c;
        for i in 0..N {
            self.g[i] *= c;
        }
        self
    }
}

impl<const N: usize> Mul for Jet1<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = self.v * rhs.g[i] + rhs.v * self.g[i];
        }
        Self { v: self.v * rhs.v, g }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> Jet2<N> {
    pub fn variable(value: f64, i: usize) -> Self {
        let mut g = [0.0; N];
        g[i] = 1.0;
        Self {
            v: value,
            g,
            h: [[0.0; N]; N],
        }
    }
}

impl<const N: usize> Field for Jet2<N> {
    #[inline]
    fn constant(c: f64) -> Self {
        Self {
            v: c,
            g: [0.0; N],
            h: [[0.0; N]; N],
        }
    }
}

impl<const N: usize> Add for Jet2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for i in 0..N {
            self.g[i] += rhs.g[i];
            for j in 0..N {
                self.h[i][j] += rhs.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Jet2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for i in 0..N {
            self.g[i] -= rhs.g[i];
            for j in 0..N {
                self.h[i][j] -= rhs.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Neg for Jet2<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Mul<f64> for Jet2<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, c: f64) -> Self {
        self.v *= c;
        for i in 0..N {
            self.g[i] *= c;
            for j in 0..N {
                self.h[i][j] *= c;
            }
        }
        self
    }
}

impl<const N: usize> Mul for Jet2<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut g = [0.0; N];
        let mut h = [[0.0; N]; N];
        for i in 0..N {
            g[i] = self.v * rhs.g[i] + rhs.v * self.g[i];
            for j in i..N {
                let hij = self.v * rhs.h[i][j]
                    + rhs.v * self.h[i][j]
                    + self.g[i] * rhs.g[j]
                    + self.g[j] * rhs.g[i];
                h[i][j] = hij;
                h[j][i] = hij;
            }
        }
        Self {
            v: self.v * rhs.v,
            g,
            h,
        }
    }
}
