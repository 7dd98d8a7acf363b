//! Effective Hamiltonian estimates from the discounted cell problem, and the
//! quantities derived from them: the critical value `λ̄`, the minimiser `θ̄`,
//! and structural diagnostics (convexity, μ-slope, uniform convergence).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{collapse_gap, lipschitz_seminorm, solve_delta_problem, CellOptions};
use crate::discretize::DriftScheme;
use crate::env::{sample_realization, CoefficientField, EnvironmentSpec, FieldConstants, Kind};
use crate::error::{LabError, Result};
use crate::numerics::{as_integer, euclid, KahanSum};

/// Maximum number of points in a tabulated p-grid.
pub const MAX_TABLE_POINTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Strictly decreasing discount factors.
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Torus side is at least `k_torus / δ`.
    pub k_torus: f64,
    /// Extra multiplier on the torus side (for size-bias checks).
    pub torus_factor: f64,
    /// Grid spacing of the cell problem.
    pub h: f64,
    /// Relative seed spread above which a sample is flagged.
    pub ergodicity_budget: f64,
    pub scheme: DriftScheme,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            deltas: vec![0.2, 0.1, 0.05],
            seeds: (0..8).collect(),
            k_torus: 10.0,
            torus_factor: 1.0,
            h: 1.0 / 16.0,
            ergodicity_budget: 0.05,
            scheme: DriftScheme::Hybrid,
        }
    }
}

impl Schedule {
    pub fn check(&self) -> Result<()> {
        if self.deltas.is_empty() || self.seeds.is_empty() {
            return Err(LabError::Config("δ schedule and seed list must be non-empty".into()));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(LabError::Config("every δ must lie in (0, 1]".into()));
        }
        if self.deltas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(LabError::Config("δ schedule must be strictly decreasing".into()));
        }
        if !(self.h > 0.0 && self.k_torus > 0.0 && self.torus_factor >= 1.0) {
            return Err(LabError::Config("h and k_torus must be positive, torus_factor ≥ 1".into()));
        }
        Ok(())
    }
}

/// Torus side for a given δ: at least `K/δ` and four correlation lengths,
/// a whole number of torus units, with an even number of grid cells.
pub fn torus_length(spec: &EnvironmentSpec, delta: f64, k_torus: f64, h: f64) -> Result<f64> {
    fit_length(spec, (k_torus / delta).max(4.0 * spec.correlation_length()), h)
}

/// Smallest admissible torus side `≥ base` for this environment and spacing.
pub fn fit_length(spec: &EnvironmentSpec, base: f64, h: f64) -> Result<f64> {
    let unit = spec.torus_unit().unwrap_or(2.0 * h);
    let mut l = (base / unit - 1e-9).ceil().max(1.0) * unit;
    for _ in 0..64 {
        if let Some(n) = as_integer(l / h) {
            if n % 2 == 0 && n >= 4 {
                return Ok(l);
            }
        }
        l += unit;
    }
    Err(LabError::Config(format!(
        "no torus side compatible with unit {unit} and h = {h}"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffHamSample {
    pub dim: usize,
    pub p: [f64; 2],
    pub mu: f64,
    /// Extrapolated (or finest raw) estimate.
    pub value: f64,
    pub delta_schedule: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Seed-averaged torus mean of `−δv` per δ.
    pub raw: Vec<f64>,
    /// Seed-averaged `−δv` at the origin per δ.
    pub origin: Vec<f64>,
    /// Dispersion of `−δv(0)` across seeds at the smallest δ.
    pub spread: f64,
    pub extrapolated: bool,
    pub flagged: bool,
    pub max_collapse_gap: f64,
    pub max_lipschitz: f64,
    /// Coercivity envelope from the field constants.
    pub envelope: (f64, f64),
}

impl EffHamSample {
    /// Signed slack of the coercivity envelope (negative means violated).
    pub fn envelope_margin(&self) -> f64 {
        let tol = 3.0 * self.spread + 1e-6;
        (self.value - self.envelope.0 + tol).min(self.envelope.1 - self.value + tol)
    }
}

/// Fields for every (δ, seed) pair, sampled once and reused across (p, μ).
pub struct Estimator {
    pub spec: EnvironmentSpec,
    pub schedule: Schedule,
    fields: Vec<Vec<CoefficientField>>,
    constants: FieldConstants,
}

impl Estimator {
    pub fn new(spec: &EnvironmentSpec, schedule: &Schedule) -> Result<Estimator> {
        spec.check()?;
        schedule.check()?;
        // only checkerboards depend on the seed
        let mut schedule = schedule.clone();
        if spec.kind != Kind::Checkerboard {
            schedule.seeds.truncate(1);
        }
        let fields = schedule
            .deltas
            .iter()
            .map(|&delta| {
                let l = torus_length(spec, delta, schedule.k_torus * schedule.torus_factor, schedule.h)?;
                schedule
                    .seeds
                    .par_iter()
                    .map(|&seed| sample_realization(spec, seed, l, schedule.h))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut constants: Option<FieldConstants> = None;
        for f in fields.iter().flatten() {
            let k = f.constants();
            constants = Some(match constants {
                None => k,
                Some(c) => FieldConstants {
                    ellipticity_min: c.ellipticity_min.min(k.ellipticity_min),
                    ellipticity_max: c.ellipticity_max.max(k.ellipticity_max),
                    c_min: c.c_min.min(k.c_min),
                    big_c: c.big_c.max(k.big_c),
                    drift_sup: c.drift_sup.max(k.drift_sup),
                },
            });
        }
        Ok(Estimator {
            spec: spec.clone(),
            schedule,
            fields,
            constants: constants.expect("non-empty schedule"),
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dimension
    }

    pub fn constants(&self) -> FieldConstants {
        self.constants
    }

    /// Fields used at the `k`-th δ of the schedule, one per seed.
    pub fn fields(&self, k: usize) -> &[CoefficientField] {
        &self.fields[k]
    }

    fn cell_options(&self) -> CellOptions {
        CellOptions {
            k_torus: self.schedule.k_torus,
            scheme: self.schedule.scheme,
            ..CellOptions::default()
        }
    }

    pub fn estimate(&self, p: [f64; 2], mu: f64) -> Result<EffHamSample> {
        let d = self.dim();
        let p = if d == 1 { [p[0], 0.0] } else { p };
        let opts = self.cell_options();
        let jobs: Vec<(usize, usize)> = (0..self.fields.len())
            .flat_map(|k| (0..self.schedule.seeds.len()).map(move |s| (k, s)))
            .collect();
        let results = jobs
            .par_iter()
            .map(|&(k, s)| {
                let delta = self.schedule.deltas[k];
                let sol = solve_delta_problem(&self.fields[k][s], delta, p, mu, &opts)?;
                Ok((
                    -sol.mean_delta_v(),
                    -sol.delta_v_at_origin(),
                    collapse_gap(&sol),
                    lipschitz_seminorm(&sol),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ns = self.schedule.seeds.len();
        let mut raw = Vec::new();
        let mut origin = Vec::new();
        for k in 0..self.fields.len() {
            let chunk = &results[k * ns..(k + 1) * ns];
            let mut m = KahanSum::default();
            let mut o = KahanSum::default();
            for r in chunk {
                m.add(r.0);
                o.add(r.1);
            }
            raw.push(m.total() / ns as f64);
            origin.push(o.total() / ns as f64);
        }
        let last = &results[(self.fields.len() - 1) * ns..];
        let (lo, hi) = last
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.1), b.max(r.1)));
        let spread = hi - lo;
        let deltas = &self.schedule.deltas;
        let (value, extrapolated) = richardson(deltas, &raw);
        let pn = euclid(p, d);
        let k = &self.constants;
        let envelope = (
            k.ellipticity_min * pn * pn - k.big_c * (1.0 + pn),
            k.ellipticity_max * pn * pn + k.big_c * (pn + mu),
        );
        Ok(EffHamSample {
            dim: d,
            p,
            mu,
            value,
            delta_schedule: deltas.clone(),
            seeds: self.schedule.seeds.clone(),
            raw,
            origin,
            spread,
            extrapolated,
            flagged: spread > self.schedule.ergodicity_budget * value.abs() + 1e-12,
            max_collapse_gap: results.iter().map(|r| r.2).fold(0.0, f64::max),
            max_lipschitz: results.iter().map(|r| r.3).fold(0.0, f64::max),
            envelope,
        })
    }

    pub fn value(&self, p: [f64; 2], mu: f64) -> Result<f64> {
        Ok(self.estimate(p, mu)?.value)
    }
}

/// Linear extrapolation to `δ = 0` from the two smallest discounts.
pub fn richardson(deltas: &[f64], values: &[f64]) -> (f64, bool) {
    let n = values.len();
    if n < 2 {
        return (values[n - 1], false);
    }
    let (d1, d2) = (deltas[n - 2], deltas[n - 1]);
    let (f1, f2) = (values[n - 2], values[n - 1]);
    ((d1 * f2 - d2 * f1) / (d1 - d2), true)
}

pub fn estimate_point(
    spec: &EnvironmentSpec,
    p: [f64; 2],
    mu: f64,
    schedule: &Schedule,
) -> Result<EffHamSample> {
    Estimator::new(spec, schedule)?.estimate(p, mu)
}

/// Values of the effective Hamiltonian on a symmetric axis-aligned p-lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffHamTable {
    pub mu: f64,
    pub dim: usize,
    pub p_max: f64,
    pub dp: f64,
    /// Lattice coordinates along one axis, `−p_max..=p_max`.
    pub axis: Vec<f64>,
    /// Row-major over `(i, j)` with `i` along the first axis.
    pub samples: Vec<EffHamSample>,
    pub spec: EnvironmentSpec,
    pub seeds: Vec<u64>,
}

impl EffHamTable {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn quality_mask(&self) -> Vec<bool> {
        self.samples.iter().map(|s| !s.flagged).collect()
    }

    pub fn n_axis(&self) -> usize {
        self.axis.len()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.n_axis() * j
    }

    pub fn max_spread(&self) -> f64 {
        self.samples.iter().map(|s| s.spread).fold(0.0, f64::max)
    }
}

fn lattice_axis(p_max: f64, dp: f64) -> Result<Vec<f64>> {
    if !(dp > 0.0 && p_max >= 0.0) {
        return Err(LabError::RejectedInput("need Δp > 0 and p_max ≥ 0".into()));
    }
    let half = as_integer(p_max / dp)
        .ok_or_else(|| LabError::RejectedInput(format!("p_max = {p_max} is not a multiple of Δp = {dp}")))?;
    Ok((0..=2 * half).map(|k| (k as f64 - half as f64) * dp).collect())
}

fn lattice_points(axis: &[f64], dim: usize) -> Vec<[f64; 2]> {
    if dim == 1 {
        axis.iter().map(|&x| [x, 0.0]).collect()
    } else {
        let mut out = Vec::with_capacity(axis.len() * axis.len());
        for &y in axis {
            for &x in axis {
                out.push([x, y]);
            }
        }
        out
    }
}

pub fn tabulate(estimator: &Estimator, mu: f64, p_max: f64, dp: f64) -> Result<EffHamTable> {
    let axis = lattice_axis(p_max, dp)?;
    let d = estimator.dim();
    if axis.len().pow(d as u32) > MAX_TABLE_POINTS {
        return Err(LabError::UnsupportedSize(format!(
            "{}^{d} table points exceed {MAX_TABLE_POINTS}",
            axis.len()
        )));
    }
    let points = lattice_points(&axis, d);
    let samples = points
        .par_iter()
        .map(|&p| estimator.estimate(p, mu))
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        if !s.value.is_finite() {
            return Err(LabError::Divergence(format!("non-finite estimate at p = {:?}", s.p)));
        }
    }
    Ok(EffHamTable {
        mu,
        dim: d,
        p_max,
        dp,
        axis,
        samples,
        spec: estimator.spec.clone(),
        seeds: estimator.schedule.seeds.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minimizer {
    pub theta: [f64; 2],
    pub value: f64,
    pub evaluations: usize,
}

const GOLDEN_STEP: f64 = 0.381_966_011_250_105_1;

/// Brent's line minimisation on `[a, b]` (golden-section steps safeguarding
/// parabolic interpolation) to absolute tolerance `tol`.
fn line_minimum(
    f: &dyn Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    tol: f64,
    evals: &mut usize,
) -> Result<(f64, f64)> {
    let (tol1, tol2) = (0.5 * tol, tol);
    let mut x = a + GOLDEN_STEP * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    *evals += 1;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let xm = 0.5 * (a + b);
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let previous = e;
            e = d;
            if p.abs() < (0.5 * q * previous).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN_STEP * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u)?;
        *evals += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    Ok((x, fx))
}

/// Coarse lattice argmin followed by coordinate-wise line minimisation
/// on `f`. The minimiser must not sit on the lattice boundary.
pub fn min_over_p_with(
    f: &(dyn Fn([f64; 2]) -> Result<f64> + Sync),
    dim: usize,
    axis: &[f64],
    values: &[f64],
    rounds: usize,
    tol: f64,
) -> Result<Minimizer> {
    let n = axis.len();
    let dp = if n > 1 { axis[1] - axis[0] } else { 1.0 };
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let idx = [best % n, best / n];
    for k in 0..dim {
        if idx[k] == 0 || idx[k] == n - 1 {
            return Err(LabError::Range(format!(
                "minimiser lies on the p-grid boundary (|p| = {}); increase p_max",
                axis[idx[k]].abs()
            )));
        }
    }
    let mut theta = [axis[idx[0]], if dim == 2 { axis[idx[1]] } else { 0.0 }];
    let mut value = values[best];
    let mut evals = 0;
    let rounds = if dim == 1 { 1 } else { rounds.max(1) };
    for round in 0..rounds {
        let width = dp * 0.5f64.powi(round as i32);
        let before = theta;
        for k in 0..dim {
            let line = |x: f64| {
                let mut q = theta;
                q[k] = x;
                f(q)
            };
            let (x, v) = line_minimum(&line, theta[k] - width, theta[k] + width, tol, &mut evals)?;
            if v <= value {
                theta[k] = x;
                value = v;
            }
        }
        if euclid([theta[0] - before[0], theta[1] - before[1]], dim) <= tol {
            break;
        }
    }
    Ok(Minimizer {
        theta,
        value,
        evaluations: evals,
    })
}

/// Refined minimiser of the tabulated effective Hamiltonian.
pub fn min_over_p(estimator: &Estimator, table: &EffHamTable, rounds: usize) -> Result<Minimizer> {
    let mu = table.mu;
    let f = |p: [f64; 2]| estimator.value(p, mu);
    min_over_p_with(&f, table.dim, &table.axis, &table.values(), rounds, 1e-3 * table.dp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaBarOptions {
    pub p_max: f64,
    pub dp: f64,
    pub tol_root: f64,
    pub tol_bracket: f64,
    pub mu_hi: f64,
    pub rounds: usize,
    /// Absolute tolerance of the line minimisation in p.
    pub theta_tol: f64,
    pub max_doublings: usize,
    pub max_bisections: usize,
}

impl Default for LambdaBarOptions {
    fn default() -> Self {
        LambdaBarOptions {
            p_max: 3.0,
            dp: 0.25,
            tol_root: 1e-3,
            tol_bracket: 1e-4,
            mu_hi: 1.0,
            rounds: 3,
            theta_tol: 1e-3,
            max_doublings: 30,
            max_bisections: 60,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalTriple {
    pub lambda_bar: f64,
    pub dim: usize,
    pub theta_bar: [f64; 2],
    /// Diameter of the near-zero sub-level set of the table at `λ̄`.
    pub flatness_gap: f64,
    pub grid_step: f64,
    pub tol_root: f64,
    pub tol_bracket: f64,
    /// `(μ, min_p H̄(p, μ))` for every probe, in order.
    pub probes: Vec<(f64, f64)>,
    pub bracket_widths: Vec<f64>,
}

impl CriticalTriple {
    pub fn theta(&self) -> Vec<f64> {
        self.theta_bar[..self.dim].to_vec()
    }

    /// JSON document with the triple and its tolerances.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "lambda_bar": self.lambda_bar,
            "theta_bar": self.theta(),
            "flatness_gap": self.flatness_gap,
            "tolerances": {
                "tol_root": self.tol_root,
                "tol_bracket": self.tol_bracket,
                "grid_step": self.grid_step,
            },
        })
    }
}

/// Minimum over p with a small lattice window around a previous minimiser,
/// widened until the minimiser is interior.
fn windowed_min(
    estimator: &Estimator,
    opts: &LambdaBarOptions,
    mu: f64,
    centre: Option<[f64; 2]>,
    cache: &mut Option<EffHamTable>,
) -> Result<Minimizer> {
    let d = estimator.dim();
    let f = |p: [f64; 2]| estimator.value(p, mu);
    let tol = opts.theta_tol;
    let mut full = || -> Result<Minimizer> {
        let t = tabulate(estimator, mu, opts.p_max, opts.dp)?;
        let m = min_over_p_with(&f, d, &t.axis, &t.values(), opts.rounds, tol);
        *cache = Some(t);
        m
    };
    let Some(c) = centre else {
        return full();
    };
    let mut half = 2usize;
    loop {
        let snap = |x: f64| (x / opts.dp).round() * opts.dp;
        let offsets: Vec<f64> = (0..=2 * half).map(|k| (k as f64 - half as f64) * opts.dp).collect();
        let centre = [snap(c[0]), snap(c[1])];
        if offsets.iter().any(|o| (centre[0] + o).abs() > opts.p_max + 1e-12)
            || (d == 2 && offsets.iter().any(|o| (centre[1] + o).abs() > opts.p_max + 1e-12))
        {
            return full();
        }
        let pts: Vec<[f64; 2]> = lattice_points(&offsets, d)
            .into_iter()
            .map(|q| [centre[0] + q[0], if d == 2 { centre[1] + q[1] } else { 0.0 }])
            .collect();
        let values = pts.par_iter().map(|&p| f(p)).collect::<Result<Vec<_>>>()?;
        // the shifted axis has the same spacing, so reuse the lattice search
        let shifted = |p: [f64; 2]| f(p);
        let local_axis: Vec<f64> = offsets.iter().map(|o| centre[0] + o).collect();
        if d == 1 {
            match min_over_p_with(&shifted, d, &local_axis, &values, opts.rounds, tol) {
                Err(LabError::Range(_)) => half *= 2,
                other => return other,
            }
        } else {
            // translate to a centred lattice so both axes share `offsets`
            let g = |q: [f64; 2]| f([q[0] + centre[0], q[1] + centre[1]]);
            match min_over_p_with(&g, d, &offsets, &values, opts.rounds, tol) {
                Err(LabError::Range(_)) => half *= 2,
                Ok(m) => {
                    return Ok(Minimizer {
                        theta: [m.theta[0] + centre[0], m.theta[1] + centre[1]],
                        ..m
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Bisection in μ for the root of `μ ↦ min_p H̄(p, μ)`.
pub fn compute_lambda_bar(estimator: &Estimator, opts: &LambdaBarOptions) -> Result<CriticalTriple> {
    let d = estimator.dim();
    let mut probes = Vec::new();
    let mut widths = Vec::new();
    let mut cache = None;
    let first = windowed_min(estimator, opts, 0.0, None, &mut cache)?;
    probes.push((0.0, first.value));
    if first.value > opts.tol_root {
        return Err(LabError::consistency(
            "subcritical-origin",
            format!(
                "min_p H̄(p, 0) = {:.3e} > {:.1e}; the discretization is biased upward",
                first.value, opts.tol_root
            ),
        ));
    }
    let (lambda_bar, theta_bar) = if first.value.abs() <= opts.tol_root {
        (0.0, first.theta)
    } else {
        let mut lo = 0.0;
        let mut hi = opts.mu_hi;
        let mut at_hi = windowed_min(estimator, opts, hi, Some(first.theta), &mut cache)?;
        probes.push((hi, at_hi.value));
        let mut doublings = 0;
        while at_hi.value < -opts.tol_root {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > opts.max_doublings {
                return Err(LabError::Convergence {
                    iterations: doublings,
                    residual: at_hi.value,
                    detail: "no sign change while doubling μ".into(),
                });
            }
            at_hi = windowed_min(estimator, opts, hi, Some(at_hi.theta), &mut cache)?;
            probes.push((hi, at_hi.value));
        }
        if at_hi.value.abs() <= opts.tol_root {
            (hi, at_hi.theta)
        } else {
            let mut theta = at_hi.theta;
            let mut result = None;
            for _ in 0..opts.max_bisections {
                widths.push(hi - lo);
                let mid = 0.5 * (lo + hi);
                let m = windowed_min(estimator, opts, mid, Some(theta), &mut cache)?;
                probes.push((mid, m.value));
                theta = m.theta;
                if m.value.abs() <= opts.tol_root || hi - lo <= opts.tol_bracket {
                    result = Some((mid, m.theta));
                    break;
                }
                if m.value > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            result.ok_or_else(|| LabError::Convergence {
                iterations: opts.max_bisections,
                residual: hi - lo,
                detail: "λ̄ bisection".into(),
            })?
        }
    };
    let table = match cache {
        Some(t) if t.mu == lambda_bar => t,
        _ => tabulate(estimator, lambda_bar, opts.p_max, opts.dp)?,
    };
    let level = 3.0 * opts.tol_root;
    let mut set: Vec<[f64; 2]> = table
        .samples
        .iter()
        .filter(|s| s.value <= level)
        .map(|s| s.p)
        .collect();
    set.push(theta_bar);
    let mut diameter = 0.0_f64;
    for a in &set {
        for b in &set {
            diameter = diameter.max(euclid([a[0] - b[0], a[1] - b[1]], d));
        }
    }
    Ok(CriticalTriple {
        lambda_bar,
        dim: d,
        theta_bar,
        flatness_gap: diameter,
        grid_step: opts.dp,
        tol_root: opts.tol_root,
        tol_bracket: opts.tol_bracket,
        probes,
        bracket_widths: widths,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub triples_checked: usize,
    pub tolerance: f64,
    /// Smallest midpoint defect `½(H(p−Δ) + H(p+Δ)) − H(p)` over all triples.
    pub min_defect: f64,
    /// Same, restricted to nearest-neighbour triples (Δ one lattice step).
    pub min_adjacent_defect: f64,
    pub requires_strict: bool,
    /// Offending triples as table indices `(p−Δ, p, p+Δ)` (capped).
    pub violations: Vec<(usize, usize, usize)>,
    pub pass: bool,
}

impl ConvexityReport {
    pub fn ensure(&self) -> Result<()> {
        if self.pass {
            return Ok(());
        }
        Err(LabError::Property(format!(
            "midpoint convexity: min defect {:.3e} (tolerance {:.1e}, strict required: {}), violating triples {:?}",
            self.min_defect, self.tolerance, self.requires_strict, self.violations
        )))
    }
}

/// Midpoint convexity along axis and diagonal lines of the table.
pub fn convexity_report(table: &EffHamTable) -> ConvexityReport {
    let n = table.n_axis() as i64;
    let values = table.values();
    let tol = (3.0 * table.max_spread()).max(1e-8);
    let dirs: &[[i64; 2]] = if table.dim == 1 {
        &[[1, 0]]
    } else {
        &[[1, 0], [0, 1], [1, 1], [1, -1]]
    };
    let jmax = if table.dim == 1 { 1 } else { n };
    let at = |i: i64, j: i64| -> Option<usize> {
        if i < 0 || i >= n || j < 0 || j >= jmax {
            None
        } else {
            Some((i + n * j) as usize)
        }
    };
    let mut checked = 0;
    let mut min_defect = f64::INFINITY;
    let mut min_adjacent = f64::INFINITY;
    let mut violations = Vec::new();
    for j in 0..jmax {
        for i in 0..n {
            let c = at(i, j).expect("in range");
            for dir in dirs {
                for step in 1..n {
                    let (lo, hi) = (
                        at(i - step * dir[0], j - step * dir[1]),
                        at(i + step * dir[0], j + step * dir[1]),
                    );
                    let (Some(lo), Some(hi)) = (lo, hi) else { break };
                    checked += 1;
                    let defect = 0.5 * (values[lo] + values[hi]) - values[c];
                    min_defect = min_defect.min(defect);
                    if step == 1 {
                        min_adjacent = min_adjacent.min(defect);
                    }
                    if defect < -tol && violations.len() < 32 {
                        violations.push((lo, c, hi));
                    }
                }
            }
        }
    }
    let requires_strict = table.spec.kind.is_uniquely_ergodic();
    let pass = violations.is_empty() && (!requires_strict || checked == 0 || min_defect > 0.0);
    ConvexityReport {
        triples_checked: checked,
        tolerance: tol,
        min_defect,
        min_adjacent_defect: min_adjacent,
        requires_strict,
        violations,
        pass,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MuSlopeReport {
    pub p: Vec<[f64; 2]>,
    pub mu_pair: (f64, f64),
    pub slopes: Vec<f64>,
    pub bounds: (f64, f64),
    pub tolerance: f64,
    pub pass: bool,
}

/// Difference quotients in μ at fixed p, checked against `[c_min, C]`.
pub fn mu_slope_check(estimator: &Estimator, points: &[[f64; 2]], mu_pair: (f64, f64)) -> Result<MuSlopeReport> {
    let (m1, m2) = mu_pair;
    if !(m2 > m1) {
        return Err(LabError::RejectedInput("need μ₁ < μ₂".into()));
    }
    let pairs = points
        .par_iter()
        .map(|&p| Ok((estimator.estimate(p, m1)?, estimator.estimate(p, m2)?)))
        .collect::<Result<Vec<_>>>()?;
    let k = estimator.constants();
    let mut tol: f64 = 0.0;
    let slopes: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| {
            tol = tol.max(3.0 * (a.spread + b.spread) / (m2 - m1));
            (b.value - a.value) / (m2 - m1)
        })
        .collect();
    let tol = tol.max(1e-6);
    let bounds = (k.c_min, k.big_c);
    let pass = slopes.iter().all(|s| *s >= bounds.0 - tol && *s <= bounds.1 + tol);
    Ok(MuSlopeReport {
        p: points.to_vec(),
        mu_pair,
        slopes,
        bounds,
        tolerance: tol,
        pass,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniformProbe {
    pub uniquely_ergodic: bool,
    pub deltas: Vec<f64>,
    /// Largest oscillation of `−δv` over the sampled windows, per δ.
    pub oscillation: Vec<f64>,
    pub windows: usize,
    /// Whether the oscillation decreases along the δ ladder.
    pub decreasing: bool,
}

/// Oscillation of `−δv` over random windows of side `1/δ`.
pub fn uniform_convergence_probe(
    spec: &EnvironmentSpec,
    p: [f64; 2],
    mu: f64,
    schedule: &Schedule,
    windows: usize,
) -> Result<UniformProbe> {
    schedule.check()?;
    let seed = schedule.seeds[0];
    let mut oscillation = Vec::new();
    for &delta in &schedule.deltas {
        let l = torus_length(spec, delta, schedule.k_torus * schedule.torus_factor, schedule.h)?;
        let field = sample_realization(spec, seed, l, schedule.h)?;
        let opts = CellOptions {
            k_torus: schedule.k_torus,
            scheme: schedule.scheme,
            ..CellOptions::default()
        };
        let sol = solve_delta_problem(&field, delta, p, mu, &opts)?;
        let grid = &sol.grid;
        let n_axis = grid.counts[0];
        let nodes = sol.nodes();
        let w: Vec<f64> = (0..nodes)
            .map(|i| -delta * (0..sol.groups).map(|g| sol.v[g * nodes + i]).sum::<f64>() / sol.groups as f64)
            .collect();
        let span = ((1.0 / (delta * grid.h)).round() as usize).clamp(1, n_axis);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
        let mut worst = 0.0_f64;
        for _ in 0..windows {
            let start = [rng.random_range(0..n_axis), rng.random_range(0..n_axis)];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let rows = if grid.dim == 1 { 1 } else { span };
            for dj in 0..rows {
                for di in 0..span {
                    let i = (start[0] + di) % n_axis;
                    let j = if grid.dim == 1 { 0 } else { (start[1] + dj) % n_axis };
                    let x = w[i + n_axis * j];
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            worst = worst.max(hi - lo);
        }
        oscillation.push(worst);
    }
    let decreasing = oscillation.windows(2).all(|o| o[1] <= o[0] + 1e-12);
    Ok(UniformProbe {
        uniquely_ergodic: spec.kind.is_uniquely_ergodic(),
        deltas: schedule.deltas.clone(),
        oscillation,
        windows,
        decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn constant_spec(drift: f64) -> EnvironmentSpec {
        EnvironmentSpec::from_toml_str(&format!(
            r#"
dimension = 1
groups = 1
kind = "constant"
ellipticity = {{ min = 0.5, max = 2.0 }}
diffusion = {{ mean = 1.0 }}
drift = {{ mean = [{drift}] }}
coupling = {{ c_min = 0.5, matrix = [[0.0]] }}
lipschitz = {{ bound = 10.0 }}
"#
        ))
        .unwrap()
    }

    fn quick() -> Schedule {
        Schedule {
            seeds: vec![0, 1],
            h: 0.25,
            ..Schedule::default()
        }
    }

    #[test]
    fn torus_length_rules() {
        let s = constant_spec(2.0);
        assert_eq!(torus_length(&s, 0.05, 10.0, 1.0 / 16.0).unwrap(), 200.0);
        assert_eq!(torus_length(&s, 0.3, 10.0, 0.25).unwrap(), 33.5);
        let mut cb = s.clone();
        cb.kind = Kind::Checkerboard;
        cb.checkerboard = Some(crate::env::Checkerboard {
            cell: 3.0,
            law: crate::env::CellLaw::Binary,
        });
        let l = torus_length(&cb, 0.3, 10.0, 0.25).unwrap();
        assert_eq!(l, 36.0);
    }

    #[test]
    fn richardson_removes_linear_bias() {
        let deltas = [0.2, 0.1, 0.05];
        let vals: Vec<f64> = deltas.iter().map(|d| 3.0 + 0.7 * d).collect();
        let (v, ex) = richardson(&deltas, &vals);
        assert!(ex && (v - 3.0).abs() < 1e-12);
        assert_eq!(richardson(&[0.1], &[2.0]), (2.0, false));
    }

    #[test]
    fn constant_point_estimate_is_exact() {
        let est = Estimator::new(&constant_spec(2.0), &quick()).unwrap();
        for (p, mu) in [(0.5, 0.0), (-1.0, 0.3), (2.0, 1.0)] {
            let s = est.estimate([p, 0.0], mu).unwrap();
            assert!((s.value - (p * p + 2.0 * p + mu)).abs() < 1e-9);
            assert_eq!(s.spread, 0.0);
            assert!(!s.flagged || s.value.abs() < 1e-12);
            assert!(s.envelope_margin() >= 0.0);
        }
    }

    #[test]
    fn golden_min_of_parabola() {
        let axis: Vec<f64> = (0..17).map(|k| -2.0 + 0.25 * k as f64).collect();
        let f = |p: [f64; 2]| Ok(p[0] * p[0] + 2.0 * p[0]);
        let values: Vec<f64> = axis.iter().map(|&x| x * x + 2.0 * x).collect();
        let m = min_over_p_with(&f, 1, &axis, &values, 3, 1e-5).unwrap();
        assert!((m.theta[0] + 1.0).abs() < 1e-3);
        assert!((m.value + 1.0).abs() < 1e-6);
        // boundary minimiser
        let shifted: Vec<f64> = axis.iter().map(|&x| (x + 2.0) * (x + 2.0)).collect();
        assert!(matches!(
            min_over_p_with(&f, 1, &axis, &shifted, 1, 1e-5),
            Err(LabError::Range(_))
        ));
    }

    #[test]
    fn two_dimensional_golden_min() {
        let axis: Vec<f64> = (0..9).map(|k| -1.0 + 0.25 * k as f64).collect();
        let h = |p: [f64; 2]| (p[0] - 0.3).powi(2) + 2.0 * (p[1] + 0.2).powi(2) + 0.5 * (p[0] - 0.3) * (p[1] + 0.2);
        let values: Vec<f64> = lattice_points(&axis, 2).into_iter().map(h).collect();
        let f = |p: [f64; 2]| Ok(h(p));
        let m = min_over_p_with(&f, 2, &axis, &values, 6, 1e-6).unwrap();
        assert!((m.theta[0] - 0.3).abs() < 1e-3 && (m.theta[1] + 0.2).abs() < 1e-3, "{m:?}");
    }

    #[test]
    fn lambda_bar_constant_closed_form() {
        let est = Estimator::new(&constant_spec(2.0), &quick()).unwrap();
        let t = compute_lambda_bar(&est, &LambdaBarOptions::default()).unwrap();
        assert!((t.lambda_bar - 1.0).abs() < 2e-3, "{t:?}");
        assert!((t.theta_bar[0] + 1.0).abs() < 0.02);
        assert!(t.bracket_widths.windows(2).all(|w| (w[1] - 0.5 * w[0]).abs() < 1e-12));
        let j = t.to_json();
        assert!(j["theta_bar"].as_array().unwrap().len() == 1);
    }

    #[test]
    fn lambda_bar_is_insensitive_to_the_initial_bracket() {
        let est = Estimator::new(&constant_spec(1.0), &quick()).unwrap();
        let a = compute_lambda_bar(&est, &LambdaBarOptions { mu_hi: 0.1, ..Default::default() }).unwrap();
        let b = compute_lambda_bar(&est, &LambdaBarOptions { mu_hi: 3.0, ..Default::default() }).unwrap();
        assert!((a.lambda_bar - b.lambda_bar).abs() <= 1e-3);
        assert!((a.lambda_bar - 0.25).abs() <= 2e-3);
    }

    #[test]
    fn convexity_of_constant_table() {
        let est = Estimator::new(&constant_spec(2.0), &quick()).unwrap();
        let t = tabulate(&est, 0.0, 2.0, 0.5).unwrap();
        let r = convexity_report(&t);
        assert!(r.pass);
        assert!((r.min_adjacent_defect - 0.25).abs() < 1e-9, "{r:?}");
        assert!(r.requires_strict);
        let values = t.values();
        assert!((values[2] + 1.0).abs() < 1e-9 && (values[1] + 0.75).abs() < 1e-9);
    }

    #[test]
    fn mu_slope_constant() {
        let est = Estimator::new(&constant_spec(2.0), &quick()).unwrap();
        let r = mu_slope_check(&est, &[[0.0, 0.0], [1.0, 0.0]], (0.0, 1.0)).unwrap();
        assert!(r.pass);
        assert!(r.slopes.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn uniform_probe_constant_is_flat() {
        let r = uniform_convergence_probe(&constant_spec(2.0), [0.5, 0.0], 0.0, &quick(), 50).unwrap();
        assert!(r.oscillation.iter().all(|o| *o < 1e-10));
    }
}
