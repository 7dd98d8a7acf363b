//! Experiment orchestration: configuration, run records with recomputable
//! verdicts, the headline experiments, and report emission.

mod experiments;
mod hj1d;
mod report;
mod tools;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::effham::{fit_length, CriticalTriple, LambdaBarOptions, Schedule};
use crate::eig::Domain;
use crate::env::{sample_realization, CoefficientField, EnvironmentSpec, Kind};
use crate::error::{LabError, Result};

pub use experiments::{run_concentration, run_criticality_convergence, run_monotonicity_suite};
pub use hj1d::{effective_solution, run_hj1d_homogenization, solve_epsilon_system, Hj1dSolutionPair};
pub use report::{emit_report, line_plot_svg, read_records, RecordSummary, ReportSummary};
pub use tools::{run_cell, run_effham_table, run_eig, run_env, run_lambda_bar};

/// Environment given inline or as a path to its own file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentRef {
    File(PathBuf),
    Inline(Box<EnvironmentSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub side: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            lower: vec![0.0],
            side: 1.0,
            x0: None,
        }
    }
}

impl DomainConfig {
    pub fn to_domain(&self, dim: usize) -> Result<Domain> {
        let pick = |v: &[f64], what: &str| -> Result<[f64; 2]> {
            match v.len() {
                1 => Ok([v[0], if dim == 2 { v[0] } else { 0.0 }]),
                2 if dim == 2 => Ok([v[0], v[1]]),
                _ => Err(LabError::Config(format!("domain {what} needs {dim} coordinates"))),
            }
        };
        if !(self.side > 0.0) {
            return Err(LabError::Config("domain side must be positive".into()));
        }
        let mut d = Domain::square(pick(&self.lower, "lower")?, self.side);
        if let Some(x0) = &self.x0 {
            d = d.with_x0(pick(x0, "x0")?);
        }
        Ok(d)
    }
}

/// Continuous piecewise polynomial on `[knots[0], knots[last]]`; piece `i`
/// holds coefficients in powers of `x − knots[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piecewise {
    pub knots: Vec<f64>,
    pub pieces: Vec<Vec<f64>>,
}

impl Default for Piecewise {
    fn default() -> Self {
        Piecewise {
            knots: vec![0.0, 1.0],
            pieces: vec![vec![1.0]],
        }
    }
}

impl Piecewise {
    pub fn constant(value: f64) -> Piecewise {
        Piecewise {
            knots: vec![0.0, 1.0],
            pieces: vec![vec![value]],
        }
    }

    fn eval_piece(&self, i: usize, x: f64) -> f64 {
        let t = x - self.knots[i];
        self.pieces[i].iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.pieces.len();
        let i = self.knots[1..n].iter().take_while(|k| x >= **k).count();
        self.eval_piece(i.min(n - 1), x)
    }

    pub fn is_constant(&self) -> bool {
        self.pieces.windows(2).all(|w| w[0] == w[1]) && self.pieces.iter().all(|p| p.iter().skip(1).all(|c| *c == 0.0))
    }

    pub fn check(&self) -> Result<()> {
        let n = self.pieces.len();
        if n == 0 || self.knots.len() != n + 1 {
            return Err(LabError::Config("g needs one more knot than pieces".into()));
        }
        if self.knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Config("g knots must increase".into()));
        }
        if self.knots[0] > 0.0 || self.knots[n] < 1.0 {
            return Err(LabError::Config("g must be defined on all of [0, 1]".into()));
        }
        for i in 1..n {
            let x = self.knots[i];
            let (l, r) = (self.eval_piece(i - 1, x), self.eval_piece(i, x));
            if (l - r).abs() > 1e-9 * (1.0 + l.abs()) {
                return Err(LabError::Config(format!("g is discontinuous at x = {x}: {l} vs {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hj1dConfig {
    pub eps: Vec<f64>,
    pub mu: f64,
    pub g: Piecewise,
    pub left: f64,
    /// Right boundary value; when absent it is read off the effective
    /// solution whose branch switch sits at the midpoint.
    pub right: Option<f64>,
    /// Grid cells per ε.
    pub cells_per_eps: usize,
    /// Number of g-levels at which branch roots are computed for varying g.
    pub g_levels: usize,
    pub seed: u64,
}

impl Default for Hj1dConfig {
    fn default() -> Self {
        Hj1dConfig {
            eps: vec![0.08, 0.04, 0.02],
            mu: 0.0,
            g: Piecewise::default(),
            left: 0.0,
            right: Some(0.0),
            cells_per_eps: 32,
            g_levels: 17,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Slack for monotonicity and certificate inequalities.
    pub monotonicity: f64,
    /// Shift below the eigenvalue estimate that the certificate must cover.
    pub certificate: f64,
    /// Cap on the concentration error at the smallest ε.
    pub concentration_cap: f64,
    /// Cap on the 1D homogenization error at the smallest ε.
    pub hj_error_cap: f64,
    /// Nested-domain agreement, in units of the root tolerance.
    pub domain_agreement: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            monotonicity: 1e-6,
            certificate: 1e-4,
            concentration_cap: 0.06,
            hj_error_cap: 0.05,
            domain_agreement: 2.0,
        }
    }
}

/// Inputs for the command-line tools that are not full experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToolConfig {
    pub deltas: Vec<f64>,
    pub p: Vec<f64>,
    pub mu: f64,
    pub p_max: f64,
    pub dp: f64,
    /// Torus side for `env` dumps.
    pub length: Option<f64>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            deltas: vec![0.2, 0.1, 0.05],
            p: vec![0.0],
            mu: 0.0,
            p_max: 2.0,
            dp: 0.25,
            length: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub environment: EnvironmentRef,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub domain: DomainConfig,
    /// Nested sub-domain; defaults to the concentric box of half the side.
    #[serde(default)]
    pub inner_domain: Option<DomainConfig>,
    /// Fraction of the side excluded at each end for sup norms.
    #[serde(default = "default_interior")]
    pub interior: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Grid spacing in micro units for dilated-domain eigenproblems.
    #[serde(default = "default_h")]
    pub h_micro: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub lambda_bar: LambdaBarOptions,
    #[serde(default)]
    pub hj1d: Hj1dConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub tools: ToolConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_id() -> String {
    "experiment".into()
}
fn default_eps() -> Vec<f64> {
    vec![0.1, 0.05, 0.025]
}
fn default_interior() -> f64 {
    1.0 / 3.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_h() -> f64 {
    1.0 / 16.0
}

impl ExperimentConfig {
    pub fn new(id: &str, spec: EnvironmentSpec) -> ExperimentConfig {
        ExperimentConfig {
            id: id.into(),
            environment: EnvironmentRef::Inline(Box::new(spec)),
            eps: default_eps(),
            domain: DomainConfig::default(),
            inner_domain: None,
            interior: default_interior(),
            seeds: default_seeds(),
            h_micro: default_h(),
            schedule: Schedule::default(),
            lambda_bar: LambdaBarOptions::default(),
            hj1d: Hj1dConfig::default(),
            tolerances: Tolerances::default(),
            tools: ToolConfig::default(),
            output: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn environment(&self) -> Result<EnvironmentSpec> {
        match &self.environment {
            EnvironmentRef::Inline(s) => {
                s.check()?;
                Ok((**s).clone())
            }
            EnvironmentRef::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { self.base_dir.join(p) };
                EnvironmentSpec::from_file(&path)
            }
        }
    }

    pub fn outer_domain(&self, dim: usize) -> Result<Domain> {
        self.domain.to_domain(dim)
    }

    pub fn inner_domain(&self, dim: usize) -> Result<Domain> {
        match &self.inner_domain {
            Some(d) => d.to_domain(dim),
            None => {
                let outer = self.outer_domain(dim)?;
                let q = 0.25 * outer.side;
                Ok(Domain::square([outer.lower[0] + q, outer.lower[1] + q], 0.5 * outer.side))
            }
        }
    }

    /// `x` lies in the interior part of the outer domain on every axis.
    pub fn in_interior(&self, x: [f64; 2], dim: usize) -> bool {
        let d = &self.domain;
        (0..dim).all(|k| {
            let lo = d.lower.get(k).or(d.lower.first()).copied().unwrap_or(0.0);
            let t = (x[k] - lo) / d.side;
            t >= self.interior - 1e-12 && t <= 1.0 - self.interior + 1e-12
        })
    }

    pub fn check(&self) -> Result<()> {
        let spec = self.environment()?;
        let dim = spec.dimension;
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(LabError::Config("ε ladder must be non-empty and positive".into()));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(LabError::Config("ε ladder must be strictly decreasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        if !(self.interior > 0.0 && self.interior < 0.5) {
            return Err(LabError::Config("interior margin must lie in (0, 1/2)".into()));
        }
        if !(self.h_micro > 0.0) {
            return Err(LabError::Config("h_micro must be positive".into()));
        }
        let outer = self.outer_domain(dim)?;
        let x0 = outer.centre(dim);
        if !self.in_interior(x0, dim) {
            return Err(LabError::Config(format!("x0 = {:?} is outside the interior margin", &x0[..dim])));
        }
        if !outer.contains(&self.inner_domain(dim)?, dim) {
            return Err(LabError::Config("inner domain must lie inside the outer domain".into()));
        }
        self.schedule.check()?;
        self.hj1d.g.check()?;
        Ok(())
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        if !seeds.is_empty() {
            self.seeds = seeds.clone();
            self.hj1d.seed = seeds[0];
            self.schedule.seeds = seeds;
        }
        self
    }
}

/// A realization large enough to hold the dilated domain at the smallest ε.
pub fn realization_for(
    spec: &EnvironmentSpec,
    seed: u64,
    domain: &Domain,
    eps_min: f64,
    h: f64,
) -> Result<CoefficientField> {
    let needed = match spec.kind {
        Kind::Constant | Kind::Periodic => spec.correlation_length().max(4.0 * h).max(h * 4.0),
        _ => {
            let far = (0..spec.dimension)
                .map(|k| domain.lower[k] + domain.side)
                .fold(0.0, f64::max);
            far / eps_min
        }
    };
    let length = fit_length(spec, needed.max(4.0 * h), h)?;
    sample_realization(spec, seed, length, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparison {
    pub fn holds(self, observed: f64, threshold: f64) -> bool {
        match self {
            Comparison::Le => observed <= threshold,
            Comparison::Lt => observed < threshold,
            Comparison::Ge => observed >= threshold,
            Comparison::Gt => observed > threshold,
        }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparison::Le => "<=",
            Comparison::Lt => "<",
            Comparison::Ge => ">=",
            Comparison::Gt => ">",
        })
    }
}

/// JSON has no NaN; skipped verdicts round-trip through `null`.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One checked property: `observed op threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: String,
    #[serde(deserialize_with = "nan_from_null")]
    pub observed: f64,
    pub op: Comparison,
    #[serde(deserialize_with = "nan_from_null")]
    pub threshold: f64,
    pub pass: bool,
    /// Set when the check was not applicable; skipped verdicts pass.
    #[serde(default)]
    pub skipped: Option<String>,
}

impl Verdict {
    pub fn check(property: &str, observed: f64, op: Comparison, threshold: f64) -> Verdict {
        Verdict {
            property: property.into(),
            observed,
            op,
            threshold,
            pass: op.holds(observed, threshold),
            skipped: None,
        }
    }

    pub fn skipped(property: &str, reason: &str) -> Verdict {
        Verdict {
            property: property.into(),
            observed: f64::NAN,
            op: Comparison::Le,
            threshold: f64::NAN,
            pass: true,
            skipped: Some(reason.into()),
        }
    }

    /// Re-evaluates the comparison from the stored numbers.
    pub fn recompute(&self) -> bool {
        self.skipped.is_some() || self.op.holds(self.observed, self.threshold)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.skipped {
            Some(r) => write!(f, "SKIP {}: {r}", self.property),
            None => write!(
                f,
                "{} {}: {:.6e} {} {:.6e}",
                if self.pass { "PASS" } else { "FAIL" },
                self.property,
                self.observed,
                self.op,
                self.threshold
            ),
        }
    }
}

/// Column-oriented raw output of an experiment, written verbatim as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }
}

/// Formats a number for a table cell (shortest round-trip form).
pub fn cell(x: impl Into<f64>) -> String {
    let x = x.into();
    format!("{x:?}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Immutable record of one experiment run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub experiment: String,
    pub environment: EnvironmentSpec,
    pub seeds: Vec<u64>,
    pub table: Table,
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
    #[serde(default)]
    pub profiles: Vec<Profile>,
    /// Published critical triple the verdicts were computed against.
    #[serde(default)]
    pub critical: Option<CriticalTriple>,
    pub wall_clock_seconds: f64,
    pub tool_version: String,
}

impl RunRecord {
    pub fn new(id: &str, experiment: &str, environment: &EnvironmentSpec, seeds: &[u64]) -> RunRecord {
        RunRecord {
            id: id.into(),
            experiment: experiment.into(),
            environment: environment.clone(),
            seeds: seeds.to_vec(),
            table: Table::default(),
            verdicts: Vec::new(),
            notes: Vec::new(),
            profiles: Vec::new(),
            critical: None,
            wall_clock_seconds: 0.0,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, property: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.property == property)
    }

    /// Converts failing verdicts into a property error.
    pub fn ensure(&self) -> Result<()> {
        let failing: Vec<String> = self.verdicts.iter().filter(|v| !v.pass).map(|v| v.to_string()).collect();
        if failing.is_empty() {
            Ok(())
        } else {
            Err(LabError::Property(format!("{}: {}", self.id, failing.join("; "))))
        }
    }
}

/// Largest increase along a sequence (≤ 0 for a nonincreasing one).
pub(crate) fn max_increase(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
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
    .expect("valid test spec")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_evaluation_and_continuity() {
        let g = Piecewise {
            knots: vec![0.0, 0.5, 1.0],
            pieces: vec![vec![1.0, 2.0], vec![2.0, -1.0, 3.0]],
        };
        g.check().unwrap();
        assert_eq!(g.eval(0.25), 1.5);
        assert!((g.eval(0.75) - (2.0 - 0.25 + 3.0 * 0.0625)).abs() < 1e-15);
        assert!(!g.is_constant());
        assert!(Piecewise::constant(1.0).is_constant());
        let broken = Piecewise {
            knots: vec![0.0, 0.5, 1.0],
            pieces: vec![vec![1.0], vec![2.0]],
        };
        assert!(matches!(broken.check(), Err(LabError::Config(_))));
    }

    #[test]
    fn verdicts_recompute() {
        let v = Verdict::check("x", 0.5, Comparison::Le, 1.0);
        assert!(v.pass && v.recompute());
        let w = Verdict::check("x", 1.5, Comparison::Lt, 1.0);
        assert!(!w.pass && !w.recompute());
        let json = serde_json::to_string(&w).unwrap();
        let back: Verdict = serde_json::from_str(&json).unwrap();
        assert_eq!(back.op, Comparison::Lt);
        assert!(Verdict::skipped("y", "flat spot").pass);
    }

    #[test]
    fn config_parsing_and_checks() {
        let text = r#"
id = "demo"
eps = [0.1, 0.05]
seeds = [1, 2]
[environment]
dimension = 1
groups = 1
kind = "constant"
ellipticity = { min = 0.5, max = 2.0 }
diffusion = { mean = 1.0 }
drift = { mean = [2.0] }
coupling = { c_min = 0.5, matrix = [[0.0]] }
lipschitz = { bound = 10.0 }
[tolerances]
concentration_cap = 0.1
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        cfg.check().unwrap();
        assert_eq!(cfg.tolerances.concentration_cap, 0.1);
        assert_eq!(cfg.tolerances.certificate, 1e-4);
        let inner = cfg.inner_domain(1).unwrap();
        assert_eq!((inner.lower[0], inner.side), (0.25, 0.5));

        let bad = text.replace("eps = [0.1, 0.05]", "eps = [0.05, 0.1]");
        let cfg = ExperimentConfig::from_toml_str(&bad).unwrap();
        assert!(matches!(cfg.check(), Err(LabError::Config(_))));
        assert!(ExperimentConfig::from_toml_str("id = 3").is_err());
    }

    #[test]
    fn x0_outside_interior_is_rejected() {
        let spec = constant_spec(0.0);
        let mut cfg = ExperimentConfig::new("x", spec);
        cfg.domain.x0 = Some(vec![0.1]);
        assert!(matches!(cfg.check(), Err(LabError::Config(_))));
    }
}
