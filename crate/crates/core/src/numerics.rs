//! Small dense helpers used throughout.

use serde::{Deserialize, Serialize};

/// Symmetric 2×2 matrix; in one dimension only `xx` is meaningful.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymMat {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl SymMat {
    pub fn scalar(a: f64) -> Self {
        SymMat {
            xx: a,
            xy: 0.0,
            yy: a,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 0) => self.xx,
            (1, 1) => self.yy,
            _ => self.xy,
        }
    }

    /// Extreme eigenvalues `(min, max)` of the leading `dim × dim` block.
    pub fn eig_range(&self, dim: usize) -> (f64, f64) {
        if dim == 1 {
            return (self.xx, self.xx);
        }
        let mean = 0.5 * (self.xx + self.yy);
        let rad = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (mean - rad, mean + rad)
    }

    pub fn quad(&self, q: [f64; 2], dim: usize) -> f64 {
        if dim == 1 {
            self.xx * q[0] * q[0]
        } else {
            self.xx * q[0] * q[0] + 2.0 * self.xy * q[0] * q[1] + self.yy * q[1] * q[1]
        }
    }

    pub fn apply(&self, q: [f64; 2], dim: usize) -> [f64; 2] {
        if dim == 1 {
            [self.xx * q[0], 0.0]
        } else {
            [
                self.xx * q[0] + self.xy * q[1],
                self.xy * q[0] + self.yy * q[1],
            ]
        }
    }

    pub fn inverse(&self, dim: usize) -> SymMat {
        if dim == 1 {
            return SymMat {
                xx: 1.0 / self.xx,
                xy: 0.0,
                yy: 0.0,
            };
        }
        let det = self.xx * self.yy - self.xy * self.xy;
        SymMat {
            xx: self.yy / det,
            xy: -self.xy / det,
            yy: self.xx / det,
        }
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        SymMat {
            xx: self.xx + other.xx,
            xy: self.xy + other.xy,
            yy: self.yy + other.yy,
        }
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat {
            xx: self.xx * s,
            xy: self.xy * s,
            yy: self.yy * s,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn dot2(a: [f64; 2], b: [f64; 2], dim: usize) -> f64 {
    (0..dim).map(|k| a[k] * b[k]).sum()
}

pub fn euclid(a: [f64; 2], dim: usize) -> f64 {
    dot2(a, a, dim).sqrt()
}

/// Compensated (Neumaier) summation.
#[derive(Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Round `x` to an integer if it is one up to relative noise.
pub fn as_integer(x: f64) -> Option<usize> {
    if !x.is_finite() || x < 0.0 {
        return None;
    }
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}
