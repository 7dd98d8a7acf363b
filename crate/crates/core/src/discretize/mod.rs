//! Finite-difference assembly of the coupled linear operator
//! `−tr(A D²φ) + b·Dφ + Σ c φ` and of the weight operator `Σ σ φ`.
//!
//! Unknowns are stored group-major: entry `group * nodes + node`.

mod grid;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use grid::{Grid, Topology, MIN_NODES_PER_AXIS};

use crate::env::{CoefficientField, FieldSamples};
use crate::error::{LabError, Result};
use crate::linalg::{SparseMatrix, TripletBuilder};
use crate::numerics::SymMat;

/// First-order term discretization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftScheme {
    /// One-sided differences against the flow everywhere (first order).
    Upwind,
    /// Central differences wherever the cell Péclet number keeps the
    /// stencil monotone, upwind elsewhere (second order in smooth regions).
    #[default]
    Hybrid,
}

/// Second-order stencil for `−tr(A D²v) ≈ Σ w (v_c − v_off)`.
#[derive(Clone, Debug)]
pub struct DiffusionStencil {
    pub entries: Vec<([i64; 2], f64)>,
    /// Whether every weight is non-negative.
    pub monotone: bool,
    /// Effective axis diffusion left after the mixed term, used for Péclet checks.
    pub axis_weight: [f64; 2],
}

pub fn diffusion_stencil(a: &SymMat, dim: usize, h: f64) -> DiffusionStencil {
    let h2 = h * h;
    if dim == 1 {
        let w = a.xx / h2;
        return DiffusionStencil {
            entries: vec![([1, 0], w), ([-1, 0], w)],
            monotone: a.xx >= 0.0,
            axis_weight: [a.xx, 0.0],
        };
    }
    let s = a.xy.abs();
    if s <= a.xx.min(a.yy) {
        let (wx, wy, wd) = ((a.xx - s) / h2, (a.yy - s) / h2, s / h2);
        let mut entries = vec![([1, 0], wx), ([-1, 0], wx), ([0, 1], wy), ([0, -1], wy)];
        if s > 0.0 {
            if a.xy > 0.0 {
                entries.extend([([1, 1], wd), ([-1, -1], wd)]);
            } else {
                entries.extend([([1, -1], wd), ([-1, 1], wd)]);
            }
        }
        DiffusionStencil {
            entries,
            monotone: true,
            axis_weight: [a.xx - s, a.yy - s],
        }
    } else {
        let (wx, wy, wd) = (a.xx / h2, a.yy / h2, a.xy / (2.0 * h2));
        DiffusionStencil {
            entries: vec![
                ([1, 0], wx),
                ([-1, 0], wx),
                ([0, 1], wy),
                ([0, -1], wy),
                ([1, 1], wd),
                ([-1, -1], wd),
                ([1, -1], -wd),
                ([-1, 1], -wd),
            ],
            monotone: false,
            axis_weight: [0.0, 0.0],
        }
    }
}

/// Whether central differencing of a first-order term with velocity `v`
/// keeps the stencil monotone on an axis with effective diffusion `w`.
#[inline]
pub fn central_is_monotone(v: f64, w: f64, h: f64) -> bool {
    v.abs() * h <= 2.0 * w
}

/// Assembled `M` acting on group-major vectors.
#[derive(Clone, Debug)]
pub struct BlockOperator {
    pub matrix: SparseMatrix,
    pub groups: usize,
    pub nodes: usize,
    pub grid: Grid,
    /// Non-positive off-diagonal and positive diagonal.
    pub is_m_compatible: bool,
    /// False when some node needed the non-monotone mixed-derivative stencil.
    pub monotone_stencil: bool,
}

/// Assembled weight operator `S`.
#[derive(Clone, Debug)]
pub struct MassOperator {
    pub matrix: SparseMatrix,
    pub groups: usize,
    pub nodes: usize,
}

impl BlockOperator {
    pub fn write_coo(&self, path: &Path) -> Result<()> {
        write_coo(&self.matrix, path)
    }
}

pub fn write_coo(matrix: &SparseMatrix, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    matrix
        .write_coo(std::io::BufWriter::new(file))
        .map_err(|e| LabError::io(path, e))
}

/// Upwind assembly of the coupled operator on `grid`.
pub fn assemble_system(field: &CoefficientField, grid: &Grid) -> Result<BlockOperator> {
    assemble_system_with(&field.sample_on(grid)?, grid, DriftScheme::Upwind)
}

/// Assembly from nodal samples with a chosen drift scheme.
pub fn assemble_system_with(
    s: &FieldSamples,
    grid: &Grid,
    scheme: DriftScheme,
) -> Result<BlockOperator> {
    let n = grid.node_count();
    if s.nodes != n || s.dim != grid.dim {
        return Err(LabError::RejectedInput(
            "samples do not match the grid".into(),
        ));
    }
    let m = s.groups;
    let d = grid.dim;
    let h = grid.h;
    let mut t = TripletBuilder::with_capacity(m * n, m * n * (2 * d + 1 + m + 4));
    let mut monotone = true;
    for g in 0..m {
        for i in 0..n {
            let row = g * n + i;
            let st = diffusion_stencil(&s.a(g, i), d, h);
            monotone &= st.monotone;
            let mut diag = 0.0;
            for &(off, w) in &st.entries {
                diag += w;
                if let Some(j) = grid.offset(i, off) {
                    t.push(row, g * n + j, -w);
                }
            }
            let b = s.b(g, i);
            for k in 0..d {
                let bk = b[k];
                if bk == 0.0 {
                    continue;
                }
                let mut plus = [0i64; 2];
                plus[k] = 1;
                let minus = [-plus[0], -plus[1]];
                if scheme == DriftScheme::Hybrid && central_is_monotone(bk, st.axis_weight[k], h) {
                    if let Some(j) = grid.offset(i, plus) {
                        t.push(row, g * n + j, bk / (2.0 * h));
                    }
                    if let Some(j) = grid.offset(i, minus) {
                        t.push(row, g * n + j, -bk / (2.0 * h));
                    }
                } else if bk > 0.0 {
                    diag += bk / h;
                    if let Some(j) = grid.offset(i, minus) {
                        t.push(row, g * n + j, -bk / h);
                    }
                } else {
                    diag -= bk / h;
                    if let Some(j) = grid.offset(i, plus) {
                        t.push(row, g * n + j, bk / h);
                    }
                }
            }
            for col in 0..m {
                let c = s.c(i, g, col);
                if col == g {
                    diag += c;
                } else if c != 0.0 {
                    t.push(row, col * n + i, c);
                }
            }
            t.push(row, row, diag);
        }
    }
    let matrix = t.build();
    Ok(BlockOperator {
        is_m_compatible: matrix.is_z_matrix(),
        matrix,
        groups: m,
        nodes: n,
        grid: grid.clone(),
        monotone_stencil: monotone,
    })
}

pub fn assemble_mass(field: &CoefficientField, grid: &Grid) -> Result<MassOperator> {
    assemble_mass_from(&field.sample_on(grid)?, grid)
}

pub fn assemble_mass_from(s: &FieldSamples, grid: &Grid) -> Result<MassOperator> {
    let n = grid.node_count();
    if s.nodes != n {
        return Err(LabError::RejectedInput("samples do not match the grid".into()));
    }
    let m = s.groups;
    let mut t = TripletBuilder::with_capacity(m * n, m * m * n);
    for i in 0..n {
        for a in 0..m {
            for b in 0..m {
                let w = s.sigma(i, a, b);
                if w < 0.0 {
                    return Err(LabError::consistency(
                        crate::env::WEIGHTS,
                        format!("negative weight {w} at node {i}"),
                    ));
                }
                if w != 0.0 {
                    t.push(a * n + i, b * n + i, w);
                }
            }
        }
    }
    Ok(MassOperator {
        matrix: t.build(),
        groups: m,
        nodes: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_realization, EnvironmentSpec};
    use std::f64::consts::PI;

    fn scalar_samples(n: usize, a: f64, b: f64, c: f64) -> FieldSamples {
        FieldSamples::constant(1, n, &[SymMat::scalar(a)], &[[b, 0.0]], &[vec![c]], &[vec![1.0]])
    }

    #[test]
    fn laplacian_on_four_node_torus() {
        let g = Grid::torus(1, 4, 0.25).unwrap();
        let op = assemble_system_with(&scalar_samples(4, 1.0, 0.0, 0.0), &g, DriftScheme::Upwind).unwrap();
        for i in 0..4 {
            assert_eq!(op.matrix.get(i, i), 32.0);
            assert_eq!(op.matrix.get(i, (i + 1) % 4), -16.0);
            assert_eq!(op.matrix.get(i, (i + 3) % 4), -16.0);
            assert_eq!(op.matrix.get(i, (i + 2) % 4), 0.0);
        }
        assert!(op.is_m_compatible && op.monotone_stencil);
    }

    #[test]
    fn upwind_drift_on_box() {
        let g = Grid::dirichlet(1, [0.0; 2], 8, 0.125).unwrap();
        let op = assemble_system_with(&scalar_samples(7, 1.0, 2.0, 0.0), &g, DriftScheme::Upwind).unwrap();
        assert_eq!(op.matrix.get(3, 3), 128.0 + 16.0);
        assert_eq!(op.matrix.get(3, 2), -64.0 - 16.0);
        assert_eq!(op.matrix.get(3, 4), -64.0);
        assert!(op.is_m_compatible);
        // boundary rows simply drop the missing neighbour
        assert_eq!(op.matrix.row(0).count(), 2);
    }

    #[test]
    fn hybrid_is_central_when_monotone() {
        let g = Grid::torus(1, 8, 0.125).unwrap();
        let op = assemble_system_with(&scalar_samples(8, 1.0, 2.0, 0.0), &g, DriftScheme::Hybrid).unwrap();
        assert_eq!(op.matrix.get(3, 3), 128.0);
        assert_eq!(op.matrix.get(3, 4), -64.0 + 8.0);
        assert_eq!(op.matrix.get(3, 2), -64.0 - 8.0);
        // large drift falls back to upwind and stays a Z-matrix
        let op = assemble_system_with(&scalar_samples(8, 1.0, 40.0, 0.0), &g, DriftScheme::Hybrid).unwrap();
        assert!(op.is_m_compatible);
        assert_eq!(op.matrix.get(3, 4), -64.0);
    }

    #[test]
    fn mixed_derivative_stencil_choice() {
        let monotone = diffusion_stencil(&SymMat { xx: 2.0, xy: 0.5, yy: 1.0 }, 2, 0.1);
        assert!(monotone.monotone);
        assert!(monotone.entries.iter().all(|e| e.1 >= 0.0));
        let cross = diffusion_stencil(&SymMat { xx: 2.0, xy: 1.2, yy: 1.0 }, 2, 0.1);
        assert!(!cross.monotone);
    }

    fn apply_to(op: &BlockOperator, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        let x: Vec<f64> = (0..op.nodes).map(|i| f(op.grid.position(i))).collect();
        op.matrix.mul_vec(&x)
    }

    fn refinement_errors(scheme: DriftScheme, dim: usize, shear: f64) -> Vec<f64> {
        // smooth periodic coefficients against an analytic operator
        let a = |y: [f64; 2]| 1.5 + 0.3 * (2.0 * PI * y[0]).sin();
        let b = |y: [f64; 2]| 3.0 + 0.5 * (2.0 * PI * y[1]).cos();
        let u = |y: [f64; 2]| (2.0 * PI * y[0]).sin() + (2.0 * PI * (y[0] + y[1])).cos();
        let lu = |y: [f64; 2]| -> f64 {
            let tp = 2.0 * PI;
            let (s1, c12) = ((tp * y[0]).sin(), (tp * (y[0] + y[1])).cos());
            let uxx = -tp * tp * (s1 + c12);
            let (uyy, uxy) = (-tp * tp * c12, -tp * tp * c12);
            let ux = tp * (tp * y[0]).cos() - tp * (tp * (y[0] + y[1])).sin();
            let uy = -tp * (tp * (y[0] + y[1])).sin();
            if dim == 1 {
                let (s1, c1) = ((tp * y[0]).sin(), (tp * y[0]).cos());
                -a(y) * (-tp * tp * (s1 + c1)) + b(y) * (tp * c1 - tp * s1) + 0.3 * (s1 + c1)
            } else {
                -(a(y) * uxx + 2.0 * shear * uxy + a(y) * uyy) + b(y) * (ux + uy) + 0.3 * (s1 + c12)
            }
        };
        let mut errs = Vec::new();
        let ladder: [usize; 3] = [128, 256, 512];
        for n in ladder {
            let h = 1.0 / n as f64;
            let g = Grid::torus(dim, n, h).unwrap();
            let nodes = g.node_count();
            let mut s = scalar_samples(nodes, 1.0, 0.0, 0.3);
            s.dim = dim;
            for i in 0..nodes {
                let y = g.position(i);
                s.a[i] = SymMat { xx: a(y), xy: if dim == 2 { shear } else { 0.0 }, yy: a(y) };
                s.b[i] = if dim == 1 { [b(y), 0.0] } else { [b(y), b(y)] };
            }
            let op = assemble_system_with(&s, &g, scheme).unwrap();
            let got = apply_to(&op, |y| if dim == 1 { (2.0 * PI * y[0]).sin() + (2.0 * PI * y[0]).cos() } else { u(y) });
            let err = (0..nodes)
                .map(|i| (got[i] - lu(g.position(i))).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        errs
    }

    #[test]
    fn refinement_order_at_least_one() {
        for (scheme, dim, shear) in [
            (DriftScheme::Upwind, 1, 0.0),
            (DriftScheme::Hybrid, 1, 0.0),
            (DriftScheme::Upwind, 2, 0.4),
            (DriftScheme::Hybrid, 2, -0.4),
        ] {
            let e = refinement_errors(scheme, dim, shear);
            let order = (e[1] / e[2]).log2();
            assert!(order >= 0.9, "{scheme:?} d={dim}: errors {e:?}");
            assert!((e[0] / e[1]).log2() >= 0.9, "{scheme:?} d={dim}: errors {e:?}");
        }
    }

    #[test]
    fn assembly_is_linear_in_coefficients() {
        let n = 16;
        let g = Grid::torus(1, n, 1.0 / 16.0).unwrap();
        let s1 = scalar_samples(n, 1.0, 0.5, 0.2);
        let s2 = scalar_samples(n, 0.7, 1.5, 0.2);
        let mut sum = scalar_samples(n, 1.7, 2.0, 0.2);
        let op1 = assemble_system_with(&s1, &g, DriftScheme::Upwind).unwrap().matrix;
        let op2 = assemble_system_with(&s2, &g, DriftScheme::Upwind).unwrap().matrix;
        let ops = assemble_system_with(&sum, &g, DriftScheme::Upwind).unwrap().matrix;
        // the zeroth-order part appears in both summands once too often
        sum.a.iter_mut().for_each(|a| *a = SymMat::scalar(0.0));
        sum.b.iter_mut().for_each(|b| *b = [0.0; 2]);
        let zeroth = assemble_system_with(&sum, &g, DriftScheme::Upwind).unwrap().matrix;
        let combo = op1.add_scaled(&op2, 1.0).add_scaled(&zeroth, -1.0);
        for i in 0..n {
            for j in 0..n {
                assert!((combo.get(i, j) - ops.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mass_from_weights_and_coo_export() {
        let spec = EnvironmentSpec::from_toml_str(
            r#"
dimension = 1
groups = 2
kind = "constant"
ellipticity = { min = 0.5, max = 2.0 }
coupling = { c_min = 0.25, sigma = [[1.0, 0.5], [0.0, 2.0]] }
lipschitz = { bound = 10.0 }
"#,
        )
        .unwrap();
        let f = sample_realization(&spec, 0, 4.0, 0.5).unwrap();
        let g = f.grid();
        let mass = assemble_mass(&f, &g).unwrap();
        assert_eq!(mass.matrix.get(0, 8), 0.5);
        assert_eq!(mass.matrix.get(8, 8), 2.0);
        assert_eq!(mass.matrix.get(8, 0), 0.0);
        let op = assemble_system(&f, &g).unwrap();
        assert_eq!(op.matrix.get(0, 8), -0.25);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.coo");
        op.write_coo(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + op.matrix.nnz());
    }
}
