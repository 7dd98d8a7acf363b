//! The discounted cell problem
//!
//! `δ v_α − tr(A_α D²v_α) + H_α(p + Dv_α) + Σ_β (μσ_αβ − c_αβ) e^{v_α − v_β} = 0`
//!
//! on a periodic torus, solved by a Newton–Howard iteration on a monotone
//! finite-difference scheme, plus the diagnostics computed on its solution.

use serde::{Deserialize, Serialize};

use crate::discretize::{
    assemble_mass_from, assemble_system_with, central_is_monotone, diffusion_stencil,
    DiffusionStencil, DriftScheme, Grid,
};
use crate::eig::{principal_eigenpair_of, EigenOptions};
use crate::env::{CoefficientField, FieldConstants, FieldSamples, Kind};
use crate::error::{LabError, Result};
use crate::linalg::{Factorization, TripletBuilder};
use crate::numerics::{euclid, norm_inf, KahanSum, SymMat};

/// Exponent magnitude beyond which group couplings are clamped.
pub const EXPONENT_CLAMP: f64 = 50.0;

/// Godunov-type numerical Hamiltonian for `H(q) = Aq·q + b·q` in control form,
/// `sup_s Σ_k (s_k⁺ q⁻_k + s_k⁻ q⁺_k) − ¼ (s − b)·A⁻¹(s − b)`.
///
/// Returns the value and the maximising velocity `s`; the derivative with
/// respect to `q⁻_k` is `s_k⁺` and with respect to `q⁺_k` is `s_k⁻`.
pub fn godunov_hamiltonian(
    a: &SymMat,
    b: [f64; 2],
    dim: usize,
    q_minus: [f64; 2],
    q_plus: [f64; 2],
) -> (f64, [f64; 2]) {
    let p = a.inverse(dim);
    let objective = |s: [f64; 2], q: [f64; 2]| -> f64 {
        let r = [s[0] - b[0], s[1] - b[1]];
        let mut v = 0.0;
        for k in 0..dim {
            v += s[k] * q[k];
        }
        v - 0.25 * p.quad(r, dim)
    };
    let mut best = (f64::NEG_INFINITY, [0.0; 2]);
    let orthants = 1usize << dim;
    for o in 0..orthants {
        let sign = |k: usize| if o & (1 << k) == 0 { 1.0 } else { -1.0 };
        let mut q = [0.0; 2];
        for k in 0..dim {
            q[k] = if sign(k) > 0.0 { q_minus[k] } else { q_plus[k] };
        }
        let feasible = |s: [f64; 2]| (0..dim).all(|k| s[k] * sign(k) >= 0.0);
        let mut consider = |s: [f64; 2]| {
            if feasible(s) {
                let v = objective(s, q);
                if v > best.0 {
                    best = (v, s);
                }
            }
        };
        let aq = a.apply(q, dim);
        let mut free = [0.0; 2];
        for k in 0..dim {
            free[k] = b[k] + 2.0 * aq[k];
        }
        consider(free);
        consider([0.0; 2]);
        if dim == 2 {
            for fixed in 0..2 {
                let j = 1 - fixed;
                let sj = b[j] + (2.0 * q[j] + p.get(j, fixed) * b[fixed]) / p.get(j, j);
                let sj = if sj * sign(j) >= 0.0 { sj } else { 0.0 };
                let mut s = [0.0; 2];
                s[j] = sj;
                consider(s);
            }
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct CellOptions {
    /// Torus side must be at least `k_torus / δ`.
    pub k_torus: f64,
    pub scheme: DriftScheme,
    /// Residual tolerance relative to `max(1, |δv|_∞)`.
    pub tol: f64,
    pub max_newton: usize,
    pub initial: Option<Vec<f64>>,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            k_torus: 10.0,
            scheme: DriftScheme::Hybrid,
            tol: 1e-8,
            max_newton: 60,
            initial: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub newton_iterations: usize,
    pub damping_events: usize,
    pub continuation_steps: usize,
    pub clamp_events: usize,
    /// Re-solves after nodes left the central-difference set.
    pub scheme_updates: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSolution {
    pub delta: f64,
    pub p: [f64; 2],
    pub mu: f64,
    /// Group-major nodal values.
    pub v: Vec<f64>,
    pub grid: Grid,
    pub groups: usize,
    /// Max-norm of the discrete residual.
    pub residual: f64,
    /// Bounds on `δv` implied by constant sub/supersolutions.
    pub delta_bounds: (f64, f64),
    pub trace: SolverTrace,
}

impl CellSolution {
    pub fn nodes(&self) -> usize {
        self.grid.node_count()
    }

    pub fn group(&self, g: usize) -> &[f64] {
        let n = self.nodes();
        &self.v[g * n..(g + 1) * n]
    }

    /// Torus average of `δ v` over nodes and groups.
    pub fn mean_delta_v(&self) -> f64 {
        let mut s = KahanSum::default();
        for v in &self.v {
            s.add(*v);
        }
        self.delta * s.total() / self.v.len() as f64
    }

    /// `δ v_1` at the grid origin.
    pub fn delta_v_at_origin(&self) -> f64 {
        self.delta * self.v[0]
    }
}

/// `(lower, upper)` bounds for `δv` given the structural constants.
pub fn delta_bounds(k: &FieldConstants, p: [f64; 2], mu: f64, dim: usize) -> (f64, f64) {
    let pn = euclid(p, dim);
    let c = k.big_c;
    (
        -(k.ellipticity_max * pn * pn + c * (pn + mu)),
        -(k.ellipticity_min * pn * pn - c * (pn + 1.0)),
    )
}

/// Per-node data and residual/Jacobian evaluation for the nonlinear system
/// `δv − ν tr(A D²v) + Ĥ(p + Dv) + Σ k e^{κ(v_α − v_β)} = g`.
pub(crate) struct HjProblem<'a> {
    pub grid: &'a Grid,
    pub samples: &'a FieldSamples,
    pub delta: f64,
    pub p: [f64; 2],
    pub exp_scale: f64,
    pub rhs: Option<&'a [f64]>,
    /// Dirichlet values at the low and high ends (box grids only).
    pub boundary: [f64; 2],
    stencils: Vec<DiffusionStencil>,
    kernel: Vec<f64>,
    /// Nodes allowed to use central gradients.
    central: Vec<bool>,
}

struct Evaluation {
    f: Vec<f64>,
    jac: Option<crate::linalg::SparseMatrix>,
    clamps: usize,
}

impl<'a> HjProblem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: &'a Grid,
        samples: &'a FieldSamples,
        delta: f64,
        p: [f64; 2],
        mu: f64,
        viscosity: f64,
        exp_scale: f64,
        rhs: Option<&'a [f64]>,
        boundary: [f64; 2],
        scheme: DriftScheme,
    ) -> Self {
        let n = grid.node_count();
        let m = samples.groups;
        let d = grid.dim;
        let stencils = (0..m * n)
            .map(|gi| {
                let (g, i) = (gi / n, gi % n);
                diffusion_stencil(&samples.a(g, i).scale(viscosity), d, grid.h)
            })
            .collect();
        let mut kernel = vec![0.0; n * m * m];
        for i in 0..n {
            for a in 0..m {
                for b in 0..m {
                    kernel[i * m * m + a * m + b] = mu * samples.sigma(i, a, b) - samples.c(i, a, b);
                }
            }
        }
        HjProblem {
            grid,
            samples,
            delta,
            p,
            exp_scale,
            rhs,
            boundary,
            stencils,
            kernel,
            central: vec![scheme == DriftScheme::Hybrid; m * n],
        }
    }

    fn groups(&self) -> usize {
        self.samples.groups
    }

    fn ghost(&self, node: usize, off: [i64; 2]) -> f64 {
        // only reached on box grids; pick the side the offset points to
        let c = self.grid.coords(node);
        let low = (0..self.grid.dim).any(|k| (c[k] as i64 + off[k]) < 0);
        if low {
            self.boundary[0]
        } else {
            self.boundary[1]
        }
    }

    fn gradients(&self, v: &[f64], g: usize, i: usize) -> ([f64; 2], [f64; 2], [f64; 2], [[Option<usize>; 2]; 2]) {
        let n = self.grid.node_count();
        let h = self.grid.h;
        let vc = v[g * n + i];
        let mut qm = self.p;
        let mut qp = self.p;
        let mut qc = self.p;
        let mut idx = [[None; 2]; 2];
        for k in 0..self.grid.dim {
            let mut plus = [0i64; 2];
            plus[k] = 1;
            let minus = [-plus[0], -plus[1]];
            let jm = self.grid.offset(i, minus);
            let jp = self.grid.offset(i, plus);
            let vm = jm.map_or_else(|| self.ghost(i, minus), |j| v[g * n + j]);
            let vp = jp.map_or_else(|| self.ghost(i, plus), |j| v[g * n + j]);
            qm[k] += (vc - vm) / h;
            qp[k] += (vp - vc) / h;
            qc[k] += (vp - vm) / (2.0 * h);
            idx[k] = [jm, jp];
        }
        (qm, qp, qc, idx)
    }

    /// Velocity of the central discretization if it is monotone at this node.
    fn central_velocity(&self, g: usize, i: usize, qc: [f64; 2]) -> Option<[f64; 2]> {
        let n = self.grid.node_count();
        let a = self.samples.a(g, i);
        let b = self.samples.b(g, i);
        let aq = a.apply(qc, self.grid.dim);
        let st = &self.stencils[g * n + i];
        let mut s = [0.0; 2];
        for k in 0..self.grid.dim {
            s[k] = 2.0 * aq[k] + b[k];
            if !central_is_monotone(s[k], st.axis_weight[k], self.grid.h) {
                return None;
            }
        }
        Some(s)
    }

    fn evaluate(&self, v: &[f64], with_jacobian: bool) -> Evaluation {
        let n = self.grid.node_count();
        let m = self.groups();
        let d = self.grid.dim;
        let h = self.grid.h;
        let mut f = vec![0.0; m * n];
        let mut t = if with_jacobian {
            Some(TripletBuilder::with_capacity(m * n, m * n * (4 * d + 2 + m)))
        } else {
            None
        };
        let mut clamps = 0;
        for g in 0..m {
            for i in 0..n {
                let row = g * n + i;
                let vc = v[row];
                let mut diag = self.delta;
                let mut val = self.delta * vc;
                if let Some(r) = self.rhs {
                    val -= r[i];
                }
                for &(off, w) in &self.stencils[row].entries {
                    match self.grid.offset(i, off) {
                        Some(j) => {
                            val += w * (vc - v[g * n + j]);
                            if let Some(t) = t.as_mut() {
                                t.push(row, g * n + j, -w);
                            }
                        }
                        None => val += w * (vc - self.ghost(i, off)),
                    }
                    diag += w;
                }
                let (qm, qp, qc, idx) = self.gradients(v, g, i);
                let a = self.samples.a(g, i);
                let b = self.samples.b(g, i);
                let central = if self.central[row] {
                    self.central_velocity(g, i, qc)
                } else {
                    None
                };
                match central {
                    Some(s) => {
                        val += a.quad(qc, d) + b[0] * qc[0] + if d == 2 { b[1] * qc[1] } else { 0.0 };
                        if let Some(t) = t.as_mut() {
                            for k in 0..d {
                                let w = s[k] / (2.0 * h);
                                if let Some(j) = idx[k][1] {
                                    t.push(row, g * n + j, w);
                                }
                                if let Some(j) = idx[k][0] {
                                    t.push(row, g * n + j, -w);
                                }
                            }
                        }
                    }
                    None => {
                        let (hv, s) = godunov_hamiltonian(&a, b, d, qm, qp);
                        val += hv;
                        for k in 0..d {
                            let (sp, sn) = (s[k].max(0.0) / h, s[k].min(0.0) / h);
                            diag += sp - sn;
                            if let Some(t) = t.as_mut() {
                                if let Some(j) = idx[k][0] {
                                    t.push(row, g * n + j, -sp);
                                }
                                if let Some(j) = idx[k][1] {
                                    t.push(row, g * n + j, sn);
                                }
                            }
                        }
                    }
                }
                let kern = &self.kernel[i * m * m + g * m..i * m * m + (g + 1) * m];
                for (beta, &k) in kern.iter().enumerate() {
                    if beta == g {
                        val += k;
                        continue;
                    }
                    if k == 0.0 {
                        continue;
                    }
                    let mut z = self.exp_scale * (vc - v[beta * n + i]);
                    let mut dz = self.exp_scale;
                    if z.abs() > EXPONENT_CLAMP {
                        clamps += 1;
                        z = z.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP);
                        dz = 0.0;
                    }
                    let e = z.exp();
                    val += k * e;
                    diag += k * dz * e;
                    if let Some(t) = t.as_mut() {
                        t.push(row, beta * n + i, -k * dz * e);
                    }
                }
                f[row] = val;
                if let Some(t) = t.as_mut() {
                    t.push(row, row, diag);
                }
            }
        }
        Evaluation {
            f,
            jac: t.map(TripletBuilder::build),
            clamps,
        }
    }

    fn max_group_gap(&self, v: &[f64]) -> f64 {
        let n = self.grid.node_count();
        let m = self.groups();
        let mut gap = 0.0_f64;
        for i in 0..n {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for g in 0..m {
                lo = lo.min(v[g * n + i]);
                hi = hi.max(v[g * n + i]);
            }
            gap = gap.max(hi - lo);
        }
        gap * self.exp_scale
    }

    fn tolerance(&self, tol: f64, v: &[f64]) -> f64 {
        let scale = if self.delta > 0.0 {
            self.delta * norm_inf(v)
        } else {
            norm_inf(v)
        };
        tol * scale.max(1.0)
    }

    /// Drops nodes whose central gradient would break monotonicity at `v`.
    fn restrict_central(&mut self, v: &[f64]) -> usize {
        let n = self.grid.node_count();
        let mut removed = 0;
        for row in 0..self.central.len() {
            if self.central[row] {
                let (g, i) = (row / n, row % n);
                let (_, _, qc, _) = self.gradients(v, g, i);
                if self.central_velocity(g, i, qc).is_none() {
                    self.central[row] = false;
                    removed += 1;
                }
            }
        }
        removed
    }
}

fn newton(
    problem: &HjProblem,
    mut v: Vec<f64>,
    pseudo_time: Option<(f64, &[f64])>,
    max_iter: usize,
    tol: f64,
    trace: &mut SolverTrace,
) -> Result<(Vec<f64>, f64)> {
    let mut last_res = f64::INFINITY;
    for _ in 0..max_iter {
        let mut ev = problem.evaluate(&v, true);
        let mut jac = ev.jac.take().expect("requested");
        if let Some((tau, old)) = pseudo_time {
            for (k, fk) in ev.f.iter_mut().enumerate() {
                *fk += (v[k] - old[k]) / tau;
            }
            jac = jac.add_scaled(&crate::linalg::SparseMatrix::identity(v.len()), 1.0 / tau);
        }
        let res = norm_inf(&ev.f);
        last_res = res;
        if !res.is_finite() {
            return Err(LabError::Divergence("non-finite residual".into()));
        }
        if res <= problem.tolerance(tol, &v) && ev.clamps == 0 {
            return Ok((v, res));
        }
        trace.clamp_events += ev.clamps;
        let rhs: Vec<f64> = ev.f.iter().map(|x| -x).collect();
        let step = Factorization::new(&jac)?.solve_with_residual(&rhs)?.0;
        trace.newton_iterations += 1;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = v.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            if cand.iter().all(|x| x.is_finite()) && problem.max_group_gap(&cand) <= EXPONENT_CLAMP {
                v = cand;
                break;
            }
            trace.damping_events += 1;
            t *= 0.5;
            if t < 1.0 / 1024.0 {
                return Err(LabError::Divergence(format!(
                    "group gap exceeds the collapse bound {EXPONENT_CLAMP} even with damped steps"
                )));
            }
        }
    }
    Err(LabError::Convergence {
        iterations: max_iter,
        residual: last_res,
        detail: "Newton iteration".into(),
    })
}

/// Newton with a pseudo-time continuation fallback; re-solves while nodes
/// leave the central-difference set.
pub(crate) fn solve_hj(
    problem: &mut HjProblem,
    initial: Vec<f64>,
    tol: f64,
    max_newton: usize,
    trace: &mut SolverTrace,
) -> Result<(Vec<f64>, f64)> {
    let mut guess = initial;
    for _ in 0..8 {
        let (v, res) = match newton(problem, guess.clone(), None, max_newton, tol, trace) {
            Ok(ok) => ok,
            Err(e) if !e.is_solver_failure() => return Err(e),
            Err(e) => {
                log::debug!("plain Newton failed ({e}); switching to pseudo-time continuation");
                continuation(problem, guess.clone(), tol, max_newton, trace)?
            }
        };
        if problem.restrict_central(&v) == 0 {
            return Ok((v, res));
        }
        trace.scheme_updates += 1;
        guess = v;
    }
    Err(LabError::Convergence {
        iterations: trace.newton_iterations,
        residual: f64::NAN,
        detail: "central-difference set did not settle".into(),
    })
}

fn continuation(
    problem: &HjProblem,
    mut v: Vec<f64>,
    tol: f64,
    max_newton: usize,
    trace: &mut SolverTrace,
) -> Result<(Vec<f64>, f64)> {
    let mut tau = 1e-2;
    loop {
        let old = v.clone();
        match newton(problem, v.clone(), Some((tau, &old)), 30, tol, trace) {
            Ok((next, _)) => {
                v = next;
                trace.continuation_steps += 1;
                tau *= 2.0;
                if tau > 1e4 {
                    if let Ok(done) = newton(problem, v.clone(), None, max_newton, tol, trace) {
                        return Ok(done);
                    }
                }
                if tau > 1e12 {
                    break;
                }
            }
            Err(e) if !e.is_solver_failure() => return Err(e),
            Err(_) => {
                tau *= 0.25;
                if tau < 1e-8 {
                    break;
                }
            }
        }
    }
    let res = norm_inf(&problem.evaluate(&v, false).f);
    Err(LabError::Convergence {
        iterations: trace.newton_iterations,
        residual: res,
        detail: "pseudo-time continuation".into(),
    })
}

/// Solves the δ-problem on the field's own torus.
pub fn solve_delta_problem(
    field: &CoefficientField,
    delta: f64,
    p: [f64; 2],
    mu: f64,
    options: &CellOptions,
) -> Result<CellSolution> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(LabError::RejectedInput(format!("δ = {delta} must be positive")));
    }
    if mu < 0.0 {
        return Err(LabError::RejectedInput(format!("μ = {mu} must be non-negative")));
    }
    if field.length + 1e-9 < options.k_torus / delta {
        return Err(LabError::Precondition(format!(
            "torus side {} is below K/δ = {}",
            field.length,
            options.k_torus / delta
        )));
    }
    let grid = field.grid();
    let samples = &field.samples;
    let n = grid.node_count();
    let m = field.groups();
    let d = field.dim();
    let mut problem = HjProblem::new(&grid, samples, delta, p, mu, 1.0, 1.0, None, [0.0; 2], options.scheme);

    let initial = match &options.initial {
        Some(v) if v.len() == m * n => v.clone(),
        Some(_) => return Err(LabError::RejectedInput("initial guess has the wrong size".into())),
        None => {
            let mut acc = KahanSum::default();
            for g in 0..m {
                for i in 0..n {
                    let (a, b) = (samples.a(g, i), samples.b(g, i));
                    let mut h = a.quad(p, d);
                    for k in 0..d {
                        h += b[k] * p[k];
                    }
                    let f: f64 = (0..m).map(|beta| mu * samples.sigma(i, g, beta) - samples.c(i, g, beta)).sum();
                    acc.add(h + f);
                }
            }
            vec![-acc.total() / ((m * n) as f64 * delta); m * n]
        }
    };
    let mut trace = SolverTrace::default();
    let (v, residual) = solve_hj(&mut problem, initial, options.tol, options.max_newton, &mut trace)?;

    let bounds = delta_bounds(&field.constants(), p, mu, d);
    let dv: Vec<f64> = v.iter().map(|x| delta * x).collect();
    let slack = 1e-7 * norm_inf(&dv).max(1.0);
    if let Some(bad) = dv.iter().position(|x| *x < bounds.0 - slack || *x > bounds.1 + slack) {
        return Err(LabError::consistency(
            "delta-bounds",
            format!(
                "δv = {:.6e} at index {bad} outside [{:.6e}, {:.6e}]",
                dv[bad], bounds.0, bounds.1
            ),
        ));
    }
    Ok(CellSolution {
        delta,
        p,
        mu,
        v,
        grid,
        groups: m,
        residual,
        delta_bounds: bounds,
        trace,
    })
}

/// `max_y (max_α v_α − min_α v_α)`.
pub fn collapse_gap(sol: &CellSolution) -> f64 {
    let n = sol.nodes();
    (0..n)
        .map(|i| {
            let vals = (0..sol.groups).map(|g| sol.v[g * n + i]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Largest one-sided difference quotient over groups, nodes and axes.
pub fn lipschitz_seminorm(sol: &CellSolution) -> f64 {
    let n = sol.nodes();
    let grid = &sol.grid;
    let mut best = 0.0_f64;
    for g in 0..sol.groups {
        for i in 0..n {
            for k in 0..grid.dim {
                let mut off = [0i64; 2];
                off[k] = 1;
                if let Some(j) = grid.offset(i, off) {
                    best = best.max((sol.v[g * n + j] - sol.v[g * n + i]).abs() / grid.h);
                }
            }
        }
    }
    best
}

/// Torus average of forward differences per axis (zero by periodicity).
pub fn mean_gradient(sol: &CellSolution) -> Result<Vec<f64>> {
    let grid = &sol.grid;
    if !grid.is_torus() {
        return Err(LabError::Precondition("mean gradient needs a periodic grid".into()));
    }
    let n = sol.nodes();
    let mut out = Vec::with_capacity(grid.dim);
    for k in 0..grid.dim {
        let mut off = [0i64; 2];
        off[k] = 1;
        let mut s = KahanSum::default();
        for g in 0..sol.groups {
            for i in 0..n {
                let j = grid.offset(i, off).expect("torus");
                s.add((sol.v[g * n + j] - sol.v[g * n + i]) / grid.h);
            }
        }
        out.push(s.total() / (n * sol.groups) as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub delta: f64,
    pub mu_pair: (f64, f64),
    pub p_pair: ([f64; 2], [f64; 2]),
    /// Constants used in the μ-sandwich and the p-estimate.
    pub c_lower: f64,
    pub c_upper: f64,
    pub c_p: f64,
    /// `min(δv(μ₁) − δv(μ₂) − c(μ₂−μ₁))` over nodes.
    pub mu_lower_margin: f64,
    /// `min(C(μ₂−μ₁) − (δv(μ₁) − δv(μ₂)))`.
    pub mu_upper_margin: f64,
    /// `min(C_p(1+|p₁|+|p₂|)|p₁−p₂| − δ|v(p₁)−v(p₂)|)`.
    pub p_margin: f64,
    pub worst_node_mu: usize,
    pub worst_node_p: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl ContinuityReport {
    pub fn ensure(&self) -> Result<()> {
        if self.pass {
            Ok(())
        } else {
            Err(LabError::Property(format!(
                "continuity estimates violated: μ margins ({:.3e}, {:.3e}) at node {}, p margin {:.3e} at node {}",
                self.mu_lower_margin, self.mu_upper_margin, self.worst_node_mu, self.p_margin, self.worst_node_p
            )))
        }
    }
}

/// Checks the continuity of `δv` in `μ` (at `p_pair.0`) and in `p` (at
/// `mu_pair.0`). Solves use the fully monotone Godunov scheme, for which the
/// discrete comparison principle makes both estimates exact.
pub fn continuity_checks(
    field: &CoefficientField,
    delta: f64,
    mu_pair: (f64, f64),
    p_pair: ([f64; 2], [f64; 2]),
    options: &CellOptions,
) -> Result<ContinuityReport> {
    let (mu1, mu2) = mu_pair;
    if !(mu2 > mu1) {
        return Err(LabError::RejectedInput("need μ₁ < μ₂".into()));
    }
    let opts = CellOptions {
        scheme: DriftScheme::Upwind,
        ..options.clone()
    };
    let d = field.dim();
    let k = field.constants();
    let s_mu1 = solve_delta_problem(field, delta, p_pair.0, mu1, &opts)?;
    let s_mu2 = solve_delta_problem(field, delta, p_pair.0, mu2, &opts)?;
    let s_p2 = solve_delta_problem(field, delta, p_pair.1, mu1, &opts)?;
    let s_p1 = &s_mu1;

    let m = field.groups();
    let sigma_diagonal = (0..field.samples.nodes).all(|i| {
        (0..m).all(|a| (0..m).all(|b| a == b || field.samples.sigma(i, a, b) == 0.0))
    });
    let gap = collapse_gap(&s_mu1).max(collapse_gap(&s_mu2));
    let (c_lower, c_upper) = if sigma_diagonal {
        (k.c_min, k.big_c)
    } else {
        (k.c_min * (-gap).exp(), k.big_c * gap.exp())
    };
    let tol = 1e-6;
    let dmu = mu2 - mu1;
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    let mut worst_mu = 0;
    for (idx, (a, b)) in s_mu1.v.iter().zip(&s_mu2.v).enumerate() {
        let diff = delta * (a - b);
        let lo = diff - c_lower * dmu;
        let hi = c_upper * dmu - diff;
        if lo.min(hi) < lower.min(upper) {
            worst_mu = idx;
        }
        lower = lower.min(lo);
        upper = upper.min(hi);
    }
    let lip = lipschitz_seminorm(s_p1).max(lipschitz_seminorm(&s_p2));
    let lam_max = k.ellipticity_max;
    let c_p = (2.0 * lam_max)
        .max(2.0 * lam_max * (d as f64).sqrt() * lip + k.drift_sup)
        .max(1.0);
    let dp = euclid([p_pair.0[0] - p_pair.1[0], p_pair.0[1] - p_pair.1[1]], d);
    let bound = c_p * (1.0 + euclid(p_pair.0, d) + euclid(p_pair.1, d)) * dp;
    let mut p_margin = f64::INFINITY;
    let mut worst_p = 0;
    for (idx, (a, b)) in s_p1.v.iter().zip(&s_p2.v).enumerate() {
        let r = bound - delta * (a - b).abs();
        if r < p_margin {
            p_margin = r;
            worst_p = idx;
        }
    }
    Ok(ContinuityReport {
        delta,
        mu_pair,
        p_pair,
        c_lower,
        c_upper,
        c_p,
        mu_lower_margin: lower,
        mu_upper_margin: upper,
        p_margin,
        worst_node_mu: worst_mu,
        worst_node_p: worst_p,
        tolerance: tol,
        pass: lower >= -tol && upper >= -tol && p_margin >= -tol,
    })
}

/// Periodic principal eigenproblem for `e^{−θ·y} u` with `u` periodic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThetaCellResult {
    pub theta: [f64; 2],
    pub lambda: f64,
    /// Periodic factor, group-major, normalised to 1 at the origin.
    pub u: Vec<f64>,
    /// `e^{−θ·y} u` on the torus nodes.
    pub psi: Vec<f64>,
    pub grid: Grid,
    pub residual: f64,
}

/// Conjugating by `e^{−θ·y}` turns the eigenproblem into a periodic one with
/// drift `b + 2Aθ` and an extra zeroth-order term `−(Aθ·θ + b·θ)`.
pub fn solve_theta_exponential(
    field: &CoefficientField,
    theta: [f64; 2],
    options: &EigenOptions,
) -> Result<ThetaCellResult> {
    if !matches!(field.spec.kind, Kind::Periodic | Kind::Constant) {
        return Err(LabError::Precondition(
            "the exponential cell problem needs a periodic environment".into(),
        ));
    }
    let d = field.dim();
    let grid = field.grid();
    let n = grid.node_count();
    let m = field.groups();
    let mut s = field.samples.clone();
    for g in 0..m {
        for i in 0..n {
            let a = s.a(g, i);
            let b = s.b(g, i);
            let at = a.apply(theta, d);
            let mut shift = a.quad(theta, d);
            for k in 0..d {
                shift += b[k] * theta[k];
                s.b[g * n + i][k] = b[k] + 2.0 * at[k];
            }
            s.c[i * m * m + g * m + g] -= shift;
        }
    }
    let op = assemble_system_with(&s, &grid, options.scheme)?;
    let mass = assemble_mass_from(&s, &grid)?;
    let mut opts = options.clone();
    opts.reference_node = Some(0);
    let pair = principal_eigenpair_of(&op, &mass, &opts)?;
    let psi = (0..m * n)
        .map(|gi| {
            let y = grid.position(gi % n);
            let phase: f64 = (0..d).map(|k| theta[k] * y[k]).sum();
            (-phase).exp() * pair.phi[gi]
        })
        .collect();
    Ok(ThetaCellResult {
        theta,
        lambda: pair.lambda,
        u: pair.phi,
        psi,
        grid,
        residual: pair.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_realization, EnvironmentSpec};

    fn field(text: &str, length: f64, h: f64) -> CoefficientField {
        sample_realization(&EnvironmentSpec::from_toml_str(text).unwrap(), 3, length, h).unwrap()
    }

    const CONSTANT: &str = r#"
dimension = 1
groups = 1
kind = "constant"
ellipticity = { min = 0.5, max = 2.0 }
diffusion = { mean = 1.0 }
drift = { mean = [2.0] }
coupling = { c_min = 0.5, matrix = [[0.0]] }
lipschitz = { bound = 10.0 }
"#;

    const TWO_GROUP: &str = r#"
dimension = 1
groups = 2
kind = "constant"
ellipticity = { min = 0.5, max = 2.0 }
diffusion = { mean = 1.0 }
coupling = { c_min = 0.5, matrix = [[1.0, -1.0], [-1.0, 1.0]] }
lipschitz = { bound = 10.0 }
"#;

    const PERIODIC: &str = r#"
dimension = 1
groups = 1
kind = "periodic"
ellipticity = { min = 0.5, max = 2.5 }
diffusion = { mean = 1.5, amplitude = 0.5 }
coupling = { c_min = 0.5, matrix = [[0.0]] }
lipschitz = { bound = 20.0 }
"#;

    #[test]
    fn control_form_matches_one_dimensional_godunov() {
        let a = SymMat::scalar(1.5);
        let b = [0.7, 0.0];
        let h = |q: f64| 1.5 * q * q + 0.7 * q;
        let qs = -0.7 / 3.0;
        for (qm, qp) in [(0.3, 0.9), (-1.0, 2.0), (0.5, -0.4), (-0.5, -0.1), (1.0, -2.0)] {
            let godunov = h(f64::max(qm, qs)).max(h(f64::min(qp, qs)));
            let (v, _) = godunov_hamiltonian(&a, b, 1, [qm, 0.0], [qp, 0.0]);
            assert!((v - godunov).abs() < 1e-12, "{qm} {qp}: {v} vs {godunov}");
        }
    }

    #[test]
    fn control_form_is_consistent_in_two_dimensions() {
        let a = SymMat { xx: 2.0, xy: 0.5, yy: 1.0 };
        let b = [0.3, -0.8];
        for q in [[0.4, -1.2], [-2.0, 0.1], [0.0, 0.0], [1.3, 0.7]] {
            let (v, s) = godunov_hamiltonian(&a, b, 2, q, q);
            let exact = a.quad(q, 2) + b[0] * q[0] + b[1] * q[1];
            assert!((v - exact).abs() < 1e-12);
            let aq = a.apply(q, 2);
            assert!((s[0] - (2.0 * aq[0] + b[0])).abs() < 1e-12);
        }
        // monotone: non-decreasing in q⁻, non-increasing in q⁺
        let base = godunov_hamiltonian(&a, b, 2, [0.2, -0.3], [0.5, 0.1]).0;
        assert!(godunov_hamiltonian(&a, b, 2, [0.3, -0.3], [0.5, 0.1]).0 >= base);
        assert!(godunov_hamiltonian(&a, b, 2, [0.2, -0.3], [0.6, 0.2]).0 <= base);
    }

    #[test]
    fn constant_field_gives_constant_solution() {
        // v ≡ −(p² + 2p + μ)/δ
        let f = field(CONSTANT, 20.0, 0.25);
        for scheme in [DriftScheme::Upwind, DriftScheme::Hybrid] {
            let opts = CellOptions { scheme, ..Default::default() };
            let sol = solve_delta_problem(&f, 0.5, [0.7, 0.0], 0.3, &opts).unwrap();
            let expect = -(0.49 + 1.4 + 0.3);
            for v in &sol.v {
                assert!((0.5 * v - expect).abs() < 1e-10);
            }
            assert!(sol.trace.newton_iterations <= 2);
        }
    }

    #[test]
    fn two_group_collapses_and_matches_closed_form() {
        let f = field(TWO_GROUP, 20.0, 0.25);
        let sol = solve_delta_problem(&f, 0.5, [1.2, 0.0], 0.4, &CellOptions::default()).unwrap();
        assert!(collapse_gap(&sol) < 1e-12);
        assert!((sol.mean_delta_v() + (1.44 + 0.4)).abs() < 1e-10);
    }

    #[test]
    fn torus_too_small_is_rejected() {
        let f = field(CONSTANT, 4.0, 0.25);
        assert!(matches!(
            solve_delta_problem(&f, 0.5, [0.0; 2], 0.0, &CellOptions::default()),
            Err(LabError::Precondition(_))
        ));
    }

    #[test]
    fn periodic_solution_respects_bounds_and_mean_gradient() {
        let f = field(PERIODIC, 20.0, 1.0 / 16.0);
        let sol = solve_delta_problem(&f, 0.5, [0.8, 0.0], 0.2, &CellOptions::default()).unwrap();
        let (lo, hi) = sol.delta_bounds;
        assert!(sol.v.iter().all(|v| 0.5 * v >= lo && 0.5 * v <= hi));
        let mg = mean_gradient(&sol).unwrap();
        assert!(mg[0].abs() <= 1e-12, "{mg:?}");
        assert!(lipschitz_seminorm(&sol) > 0.0);
        let mut boxed = sol.clone();
        boxed.grid = Grid::dirichlet(1, [0.0; 2], 8, 0.25).unwrap();
        assert!(mean_gradient(&boxed).is_err());
    }

    #[test]
    fn two_dimensional_constant_solution() {
        let text = r#"
dimension = 2
groups = 1
kind = "constant"
ellipticity = { min = 0.5, max = 3.0 }
diffusion = { mean = 1.5, shear = 0.5 }
drift = { mean = [0.5, -1.0] }
coupling = { c_min = 0.5, matrix = [[0.2]] }
lipschitz = { bound = 10.0 }
"#;
        let f = field(text, 4.0, 0.25);
        let opts = CellOptions { k_torus: 2.0, ..Default::default() };
        let p = [0.3, -0.6];
        let sol = solve_delta_problem(&f, 1.0, p, 0.1, &opts).unwrap();
        let a = SymMat { xx: 1.5, xy: 0.5, yy: 1.5 };
        let expect = -(a.quad(p, 2) + 0.5 * 0.3 + 0.6 + 0.1 - 0.2);
        assert!(sol.v.iter().all(|v| (v - expect).abs() < 1e-10));
    }

    #[test]
    fn continuity_on_constant_and_periodic() {
        for (text, h) in [(CONSTANT, 0.25), (PERIODIC, 1.0 / 16.0)] {
            let f = field(text, 20.0, h);
            let rep = continuity_checks(&f, 0.5, (0.1, 0.6), ([0.5, 0.0], [0.9, 0.0]), &CellOptions::default())
                .unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn theta_problem_constant_closed_form() {
        let f = field(CONSTANT, 4.0, 0.125);
        for theta in [-1.5, -1.0, -0.3, 0.0, 0.4] {
            let r = solve_theta_exponential(&f, [theta, 0.0], &EigenOptions::default()).unwrap();
            let expect = -theta * theta - 2.0 * theta;
            assert!((r.lambda - expect).abs() < 1e-9, "θ={theta}: {} vs {expect}", r.lambda);
        }
    }
}
