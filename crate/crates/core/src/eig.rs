//! Principal eigenpairs of `M φ = λ S φ` by shifted inverse iteration.
//!
//! Every iterate is bracketed by the Collatz–Wielandt quotients
//! `min_i (MΦ)_i/(SΦ)_i ≤ λ₁ ≤ max_i (MΦ)_i/(SΦ)_i`, which are valid for any
//! positive vector. The adaptive policy moves the shift just below the
//! lower bracket, so `M + sS` stays inverse-positive while convergence
//! becomes fast.

use serde::{Deserialize, Serialize};

use crate::discretize::{
    assemble_mass_from, assemble_system_with, BlockOperator, DriftScheme, Grid, MassOperator,
    Topology,
};
use crate::env::CoefficientField;
use crate::error::{LabError, Result};
use crate::linalg::{Factorization, SparseMatrix};
use crate::numerics::{as_integer, dot, norm2, norm_inf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftPolicy {
    /// `s = max row defect / c_min + 1`, kept for the whole iteration.
    Fixed,
    /// Start from the fixed shift, then track the Collatz–Wielandt bracket.
    #[default]
    Adaptive,
}

#[derive(Clone, Debug)]
pub struct EigenOptions {
    pub shift_policy: ShiftPolicy,
    pub tol_lambda: f64,
    pub tol_residual: f64,
    pub max_iterations: usize,
    pub scheme: DriftScheme,
    pub initial: Option<Vec<f64>>,
    /// Node (group 0) where the eigenfunction is normalised to 1.
    pub reference_node: Option<usize>,
    /// Allowed gap between the global and pointwise eigenvalue estimates.
    pub secondary_tolerance: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            shift_policy: ShiftPolicy::Adaptive,
            tol_lambda: 1e-10,
            tol_residual: 1e-8,
            max_iterations: 10_000,
            scheme: DriftScheme::Hybrid,
            initial: None,
            reference_node: None,
            secondary_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: f64,
    /// Group-major, positive, equal to 1 at (group 0, `reference_node`).
    pub phi: Vec<f64>,
    pub groups: usize,
    pub grid: Grid,
    pub residual: f64,
    pub iterations: usize,
    pub shift: f64,
    pub refactorizations: usize,
    /// Final Collatz–Wielandt bracket.
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub reference_node: usize,
    /// Pointwise quotient at the reference node.
    pub secondary_lambda: f64,
    pub ill_conditioned: bool,
    /// Scale parameter when the pair comes from a dilated domain.
    pub eps: Option<f64>,
    pub domain: Option<Domain>,
}

/// Axis-aligned cube `lower + [0, side]^d` in macroscopic units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: [f64; 2],
    pub side: f64,
    /// Normalisation point; defaults to the centre.
    pub x0: Option<[f64; 2]>,
}

impl Domain {
    pub fn interval(a: f64, b: f64) -> Domain {
        Domain {
            lower: [a, 0.0],
            side: b - a,
            x0: None,
        }
    }

    pub fn square(lower: [f64; 2], side: f64) -> Domain {
        Domain {
            lower,
            side,
            x0: None,
        }
    }

    pub fn with_x0(mut self, x0: [f64; 2]) -> Domain {
        self.x0 = Some(x0);
        self
    }

    pub fn centre(&self, dim: usize) -> [f64; 2] {
        self.x0.unwrap_or_else(|| {
            let mut c = [0.0; 2];
            for k in 0..dim {
                c[k] = self.lower[k] + 0.5 * self.side;
            }
            c
        })
    }

    pub fn contains(&self, other: &Domain, dim: usize) -> bool {
        (0..dim).all(|k| {
            other.lower[k] >= self.lower[k] - 1e-12
                && other.lower[k] + other.side <= self.lower[k] + self.side + 1e-12
        })
    }
}

fn collatz_wielandt(mphi: &[f64], sphi: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (m, s) in mphi.iter().zip(sphi) {
        if *s > 0.0 {
            let r = m / s;
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    (lo, hi)
}

/// Largest shift keeping `M + sS` a Z-matrix.
fn z_preserving_shift(m: &SparseMatrix, s: &SparseMatrix) -> f64 {
    let mut cap = f64::INFINITY;
    for (i, j, w) in s.triplets() {
        if i != j && w > 0.0 {
            cap = cap.min(-m.get(i, j) / w);
        }
    }
    cap
}

/// Principal eigenpair of assembled operators on any grid topology.
pub fn principal_eigenpair_of(
    op: &BlockOperator,
    mass: &MassOperator,
    options: &EigenOptions,
) -> Result<EigenPair> {
    let m = &op.matrix;
    let s = &mass.matrix;
    let n = m.dim();
    if s.dim() != n {
        return Err(LabError::RejectedInput("operator and weight sizes differ".into()));
    }
    if !op.is_m_compatible {
        return Err(LabError::Precondition(
            "operator is not a Z-matrix with positive diagonal; the principal eigenpair is not guaranteed"
                .into(),
        ));
    }
    let row_m = m.row_sums();
    let row_s = s.row_sums();
    let c_floor = row_s.iter().copied().fold(f64::INFINITY, f64::min);
    if !(c_floor > 0.0) {
        return Err(LabError::consistency(
            crate::env::WEIGHTS,
            "weight operator has a non-positive row sum",
        ));
    }
    let defect = row_m.iter().map(|r| (-r).max(0.0)).fold(0.0, f64::max);
    let z_cap = z_preserving_shift(m, s);
    let mut shift = (defect / c_floor + 1.0).min(z_cap);

    let reference = options.reference_node.unwrap_or_else(|| match op.grid.topology {
        Topology::Torus => 0,
        Topology::Dirichlet => {
            let mut centre = op.grid.origin;
            for c in centre.iter_mut().take(op.grid.dim) {
                *c += 0.5 * op.grid.extent();
            }
            op.grid.nearest_node(centre)
        }
    });

    let mut phi = match &options.initial {
        Some(v) if v.len() == n && v.iter().all(|x| *x > 0.0) => v.clone(),
        Some(_) => {
            return Err(LabError::RejectedInput(
                "initial vector must be positive and of matching size".into(),
            ))
        }
        None => vec![1.0; n],
    };
    let mut factor = Factorization::new(&m.add_scaled(s, shift))?;
    let mut refactorizations = 0;
    let mut lambda_prev = f64::NAN;
    let mut sphi = s.mul_vec(&phi);
    let mut last = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    for it in 1..=options.max_iterations {
        let (mut y, _) = factor.solve_with_residual(&sphi)?;
        let ymax = norm_inf(&y);
        if !(ymax > 0.0 && ymax.is_finite()) {
            return Err(LabError::Divergence("inverse iterate vanished or overflowed".into()));
        }
        let floor = -1e-10 * ymax;
        for v in y.iter_mut() {
            if *v < floor {
                return Err(LabError::Precondition(format!(
                    "shifted operator is not inverse-positive (shift {shift:.3e})"
                )));
            }
            *v = v.max(f64::MIN_POSITIVE) / ymax;
        }
        phi = y;
        sphi = s.mul_vec(&phi);
        let mphi = m.mul_vec(&phi);
        let lambda = dot(&sphi, &mphi) / dot(&sphi, &sphi);
        let (lo, hi) = collatz_wielandt(&mphi, &sphi);
        let r: Vec<f64> = mphi.iter().zip(&sphi).map(|(a, b)| a - lambda * b).collect();
        let residual = norm2(&r) / norm2(&sphi);
        last = (lambda, residual, lo, hi);
        if it > 1
            && (lambda - lambda_prev).abs() <= options.tol_lambda * lambda.abs().max(1.0)
            && residual <= options.tol_residual
        {
            let scale = phi[reference];
            for v in phi.iter_mut() {
                *v /= scale;
            }
            let mphi = m.mul_vec(&phi);
            let sphi = s.mul_vec(&phi);
            let secondary = mphi[reference] / sphi[reference];
            return Ok(EigenPair {
                lambda,
                phi,
                groups: op.groups,
                grid: op.grid.clone(),
                residual,
                iterations: it,
                shift,
                refactorizations,
                lower_bound: lo,
                upper_bound: hi,
                reference_node: reference,
                secondary_lambda: secondary,
                ill_conditioned: (secondary - lambda).abs() > options.secondary_tolerance,
                eps: None,
                domain: None,
            });
        }
        lambda_prev = lambda;
        if options.shift_policy == ShiftPolicy::Adaptive && lo.is_finite() && hi >= lo {
            let eta = (0.5 * (hi - lo)).max(1e-7 * (1.0 + lo.abs()));
            let candidate = (-lo + eta).min(z_cap);
            // distance from the shifted spectrum bottom governs the rate
            if candidate < shift && (shift + lo) > 4.0 * (candidate + lo) && refactorizations < 64 {
                match Factorization::new(&m.add_scaled(s, candidate)) {
                    Ok(f) => {
                        factor = f;
                        shift = candidate;
                        refactorizations += 1;
                    }
                    Err(e) => log::debug!("keeping shift {shift}: {e}"),
                }
            }
        }
    }
    Err(LabError::Convergence {
        iterations: options.max_iterations,
        residual: last.1,
        detail: format!(
            "inverse iteration: λ≈{:.12e}, bracket [{:.6e}, {:.6e}]",
            last.0, last.2, last.3
        ),
    })
}

/// Principal eigenpair of the coupled operator on a Dirichlet box grid.
pub fn principal_eigenpair(
    field: &CoefficientField,
    grid: &Grid,
    options: &EigenOptions,
) -> Result<EigenPair> {
    if grid.topology != Topology::Dirichlet {
        return Err(LabError::Precondition(
            "principal eigenpair requires a Dirichlet box grid".into(),
        ));
    }
    let samples = field.sample_on(grid)?;
    let op = assemble_system_with(&samples, grid, options.scheme)?;
    let mass = assemble_mass_from(&samples, grid)?;
    principal_eigenpair_of(&op, &mass, options)
}

/// Largest unknown count per axis for dilated-domain problems.
pub fn size_cap(dim: usize, groups: usize) -> usize {
    if dim == 1 {
        1_000_000 / groups.max(1)
    } else {
        10_000
    }
}

/// Micro-scale grid for the dilated domain `U/ε` with spacing `h_micro`.
pub fn dilated_grid(dim: usize, domain: &Domain, eps: f64, h_micro: f64) -> Result<Grid> {
    if !(eps > 0.0 && h_micro > 0.0 && domain.side > 0.0) {
        return Err(LabError::RejectedInput(format!(
            "need ε > 0, h > 0 and a non-empty domain (ε={eps}, h={h_micro})"
        )));
    }
    let cells = as_integer(domain.side / (eps * h_micro)).ok_or_else(|| {
        LabError::RejectedInput(format!(
            "domain side {} is not a whole number of cells of size ε·h = {}",
            domain.side,
            eps * h_micro
        ))
    })?;
    let mut origin = [0.0; 2];
    for k in 0..dim {
        origin[k] = domain.lower[k] / eps;
    }
    Grid::dirichlet(dim, origin, cells, h_micro)
}

/// `λ₁(ε⁻¹U)`: principal eigenpair on the dilated domain.
pub fn epsilon_eigenvalue(
    field: &CoefficientField,
    domain: &Domain,
    eps: f64,
    h_micro: f64,
    options: &EigenOptions,
) -> Result<EigenPair> {
    let dim = field.dim();
    let grid = dilated_grid(dim, domain, eps, h_micro)?;
    let cap = size_cap(dim, field.groups());
    if grid.counts[0] > cap {
        return Err(LabError::UnsupportedSize(format!(
            "{} unknowns per axis exceeds the cap of {cap}",
            grid.counts[0]
        )));
    }
    if !matches!(
        field.spec.kind,
        crate::env::Kind::Constant | crate::env::Kind::Periodic
    ) && grid.extent() > field.length * (1.0 + 1e-12)
    {
        return Err(LabError::Precondition(format!(
            "dilated domain of side {} exceeds the realization size {}",
            grid.extent(),
            field.length
        )));
    }
    let x0 = domain.centre(dim);
    let mut micro = [0.0; 2];
    for k in 0..dim {
        micro[k] = x0[k] / eps;
    }
    let mut opts = options.clone();
    opts.reference_node = Some(grid.nearest_node(micro));
    let mut pair = principal_eigenpair(field, &grid, &opts)?;
    pair.eps = Some(eps);
    pair.domain = Some(*domain);
    Ok(pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub certified: bool,
    /// `min_i ((MΨ)_i − λ (SΨ)_i)`.
    pub margin: f64,
}

/// Checks `MΨ ≥ λ SΨ` nodewise for a positive test vector, which certifies
/// `λ₁ ≥ λ` by the max-min characterisation.
pub fn certify_lower_bound(
    field: &CoefficientField,
    grid: &Grid,
    lambda: f64,
    psi: &[f64],
    scheme: DriftScheme,
) -> Result<Certificate> {
    let samples = field.sample_on(grid)?;
    let op = assemble_system_with(&samples, grid, scheme)?;
    let mass = assemble_mass_from(&samples, grid)?;
    certify_with(&op, &mass, lambda, psi)
}

pub fn certify_with(
    op: &BlockOperator,
    mass: &MassOperator,
    lambda: f64,
    psi: &[f64],
) -> Result<Certificate> {
    if psi.len() != op.matrix.dim() {
        return Err(LabError::RejectedInput("test vector has the wrong length".into()));
    }
    if psi.iter().any(|v| !(*v > 0.0)) {
        return Err(LabError::RejectedInput("test vector must be strictly positive".into()));
    }
    let mpsi = op.matrix.mul_vec(psi);
    let spsi = mass.matrix.mul_vec(psi);
    let margin = mpsi
        .iter()
        .zip(&spsi)
        .map(|(a, b)| a - lambda * b)
        .fold(f64::INFINITY, f64::min);
    Ok(Certificate {
        certified: margin >= 0.0,
        margin,
    })
}

/// Best lower bound certified by a positive vector: `min_i (MΨ)_i / (SΨ)_i`.
pub fn certified_lower_bound(op: &BlockOperator, mass: &MassOperator, psi: &[f64]) -> f64 {
    let mpsi = op.matrix.mul_vec(psi);
    let spsi = mass.matrix.mul_vec(psi);
    collatz_wielandt(&mpsi, &spsi).0
}

/// Transfers a box eigenfunction to another box grid by (bi)linear
/// interpolation in physical position, with zero boundary values.
pub fn interpolate_to(pair: &EigenPair, target: &Grid) -> Result<Vec<f64>> {
    let src = &pair.grid;
    if src.topology != Topology::Dirichlet || target.topology != Topology::Dirichlet {
        return Err(LabError::Precondition("interpolation is defined between box grids".into()));
    }
    let d = src.dim;
    let ns = src.node_count();
    let nt = target.node_count();
    let counts = src.counts[0] as i64;
    let value = |g: usize, c: [i64; 2]| -> f64 {
        if (0..d).any(|k| c[k] < 0 || c[k] >= counts) {
            0.0
        } else {
            pair.phi[g * ns + src.index([c[0] as usize, c[1] as usize])]
        }
    };
    let mut out = vec![0.0; pair.groups * nt];
    for i in 0..nt {
        let y = target.position(i);
        let mut base = [0i64; 2];
        let mut frac = [0.0; 2];
        for k in 0..d {
            let t = (y[k] - src.origin[k]) / src.h - 1.0;
            let f = t.floor();
            base[k] = f as i64;
            frac[k] = t - f;
        }
        for g in 0..pair.groups {
            let v = if d == 1 {
                (1.0 - frac[0]) * value(g, base) + frac[0] * value(g, [base[0] + 1, 0])
            } else {
                let mut acc = 0.0;
                for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
                    for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                        acc += wx * wy * value(g, [base[0] + dx, base[1] + dy]);
                    }
                }
                acc
            };
            out[g * nt + i] = v;
        }
    }
    Ok(out)
}

/// `ψ = −ε log φ` on macroscopic positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEigenfunction {
    pub eps: f64,
    /// Group-major values.
    pub psi: Vec<f64>,
    pub groups: usize,
    pub nodes: usize,
    pub positions: Vec<[f64; 2]>,
    pub reference_node: usize,
    /// Nodes within two macro grid steps of the boundary.
    pub boundary_layer: Vec<bool>,
}

impl LogEigenfunction {
    pub fn group(&self, g: usize) -> &[f64] {
        &self.psi[g * self.nodes..(g + 1) * self.nodes]
    }

    /// Largest spread between groups over nodes outside the boundary layer.
    pub fn group_spread(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.nodes {
            if self.boundary_layer[i] {
                continue;
            }
            let vals = (0..self.groups).map(|g| self.psi[g * self.nodes + i]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            worst = worst.max(hi - lo);
        }
        worst
    }
}

pub fn hopf_cole(pair: &EigenPair) -> Result<LogEigenfunction> {
    let eps = pair
        .eps
        .ok_or_else(|| LabError::Precondition("eigenpair does not come from a dilated domain".into()))?;
    if pair.phi.iter().any(|v| !(*v > 0.0)) {
        return Err(LabError::Precondition("eigenfunction is not strictly positive".into()));
    }
    let grid = &pair.grid;
    let nodes = grid.node_count();
    let psi: Vec<f64> = pair.phi.iter().map(|p| -eps * p.ln()).collect();
    let positions = (0..nodes)
        .map(|i| {
            let y = grid.position(i);
            [eps * y[0], eps * y[1]]
        })
        .collect();
    let boundary_layer = (0..nodes)
        .map(|i| grid.boundary_distance(i) <= 2.0 * grid.h * (1.0 + 1e-12))
        .collect();
    Ok(LogEigenfunction {
        eps,
        psi,
        groups: pair.groups,
        nodes,
        positions,
        reference_node: pair.reference_node,
        boundary_layer,
    })
}
