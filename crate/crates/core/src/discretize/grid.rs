use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// Periodic; nodes at `origin + i h`, `i = 0..count`.
    Torus,
    /// Homogeneous Dirichlet box; unknowns at `origin + (i + 1) h`, boundary nodes excluded.
    Dirichlet,
}

/// Uniform tensor grid in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    /// Unknown nodes per axis (unused axes hold 1).
    pub counts: [usize; 2],
    pub h: f64,
    pub topology: Topology,
    pub origin: [f64; 2],
}

pub const MIN_NODES_PER_AXIS: usize = 4;

impl Grid {
    pub fn torus(dim: usize, nodes_per_axis: usize, h: f64) -> Result<Grid> {
        Self::build(dim, nodes_per_axis, h, Topology::Torus, [0.0; 2])
    }

    /// Box `origin + [0, cells h]^dim` with `cells - 1` unknowns per axis.
    pub fn dirichlet(dim: usize, origin: [f64; 2], cells: usize, h: f64) -> Result<Grid> {
        if cells < 2 {
            return Err(LabError::RejectedInput("box needs at least two cells".into()));
        }
        Self::build(dim, cells - 1, h, Topology::Dirichlet, origin)
    }

    fn build(dim: usize, n: usize, h: f64, topology: Topology, origin: [f64; 2]) -> Result<Grid> {
        if !(1..=2).contains(&dim) {
            return Err(LabError::RejectedInput(format!("dimension {dim} is not 1 or 2")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(LabError::RejectedInput(format!("grid spacing {h} must be positive")));
        }
        if n < MIN_NODES_PER_AXIS {
            return Err(LabError::RejectedInput(format!(
                "{n} nodes per axis; at least {MIN_NODES_PER_AXIS} required"
            )));
        }
        let counts = if dim == 1 { [n, 1] } else { [n, n] };
        Ok(Grid {
            dim,
            counts,
            h,
            topology,
            origin,
        })
    }

    pub fn node_count(&self) -> usize {
        self.counts[0] * self.counts[1]
    }

    pub fn is_torus(&self) -> bool {
        self.topology == Topology::Torus
    }

    /// Side length of the domain covered (torus period or box width).
    pub fn extent(&self) -> f64 {
        match self.topology {
            Topology::Torus => self.counts[0] as f64 * self.h,
            Topology::Dirichlet => (self.counts[0] + 1) as f64 * self.h,
        }
    }

    #[inline]
    pub fn coords(&self, node: usize) -> [usize; 2] {
        [node % self.counts[0], node / self.counts[0]]
    }

    #[inline]
    pub fn index(&self, c: [usize; 2]) -> usize {
        c[0] + self.counts[0] * c[1]
    }

    pub fn position(&self, node: usize) -> [f64; 2] {
        let c = self.coords(node);
        let shift = match self.topology {
            Topology::Torus => 0.0,
            Topology::Dirichlet => 1.0,
        };
        let mut p = [0.0; 2];
        for k in 0..self.dim {
            p[k] = self.origin[k] + (c[k] as f64 + shift) * self.h;
        }
        p
    }

    /// Neighbour at integer offset; `None` when it falls on the Dirichlet boundary.
    #[inline]
    pub fn offset(&self, node: usize, off: [i64; 2]) -> Option<usize> {
        let c = self.coords(node);
        let mut out = [0usize; 2];
        for k in 0..2 {
            let n = self.counts[k] as i64;
            let o = if k < self.dim { off[k] } else { 0 };
            let v = c[k] as i64 + o;
            out[k] = match self.topology {
                Topology::Torus => v.rem_euclid(n) as usize,
                Topology::Dirichlet => {
                    if v < 0 || v >= n {
                        return None;
                    }
                    v as usize
                }
            };
        }
        Some(self.index(out))
    }

    /// Node closest to `point`.
    pub fn nearest_node(&self, point: [f64; 2]) -> usize {
        let shift = match self.topology {
            Topology::Torus => 0.0,
            Topology::Dirichlet => 1.0,
        };
        let mut c = [0usize; 2];
        for k in 0..self.dim {
            let t = ((point[k] - self.origin[k]) / self.h - shift).round() as i64;
            let n = self.counts[k] as i64;
            c[k] = match self.topology {
                Topology::Torus => t.rem_euclid(n) as usize,
                Topology::Dirichlet => t.clamp(0, n - 1) as usize,
            };
        }
        self.index(c)
    }

    /// Distance from a node to the box boundary (infinite on a torus).
    pub fn boundary_distance(&self, node: usize) -> f64 {
        if self.is_torus() {
            return f64::INFINITY;
        }
        let c = self.coords(node);
        (0..self.dim)
            .map(|k| {
                let lo = (c[k] + 1) as f64;
                let hi = (self.counts[k] - c[k]) as f64;
                lo.min(hi) * self.h
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_wraps_and_box_truncates() {
        let t = Grid::torus(1, 8, 0.25).unwrap();
        assert_eq!(t.offset(0, [-1, 0]), Some(7));
        assert_eq!(t.offset(7, [1, 0]), Some(0));
        let b = Grid::dirichlet(1, [0.0; 2], 8, 0.25).unwrap();
        assert_eq!(b.node_count(), 7);
        assert_eq!(b.offset(0, [-1, 0]), None);
        assert_eq!(b.position(0)[0], 0.25);
        assert_eq!(b.extent(), 2.0);
    }

    #[test]
    fn two_dimensional_indexing() {
        let g = Grid::torus(2, 5, 0.2).unwrap();
        assert_eq!(g.node_count(), 25);
        let n = g.index([4, 2]);
        assert_eq!(g.offset(n, [1, 1]), Some(g.index([0, 3])));
        assert_eq!(g.nearest_node([0.79, 0.41]), g.index([4, 2]));
    }

    #[test]
    fn tiny_grids_are_rejected() {
        assert!(Grid::torus(1, 3, 0.1).is_err());
        assert!(Grid::torus(3, 8, 0.1).is_err());
    }
}
