//! Declarative description of an environment and its TOML form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Largest number of coupled groups handled (partition checks are exponential).
pub const MAX_GROUPS: usize = 8;
/// Smallest admissible denominator for stored frequencies.
pub const MIN_FREQUENCY_DENOMINATOR: i64 = 1_000_000;

/// How the coefficients vary in space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Constant,
    Periodic,
    Checkerboard,
    Quasiperiodic,
}

impl Kind {
    /// Kinds for which spatial averages converge uniformly.
    pub fn is_uniquely_ergodic(self) -> bool {
        !matches!(self, Kind::Checkerboard)
    }
}

/// A scalar, or one value per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerGroup {
    Shared(f64),
    Each(Vec<f64>),
}

impl PerGroup {
    pub fn get(&self, group: usize) -> f64 {
        match self {
            PerGroup::Shared(v) => *v,
            PerGroup::Each(vs) => vs[group.min(vs.len() - 1)],
        }
    }

    fn len_ok(&self, groups: usize) -> bool {
        match self {
            PerGroup::Shared(_) => true,
            PerGroup::Each(vs) => vs.len() == groups,
        }
    }
}

/// A vector, or one vector per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerGroupVector {
    Shared(Vec<f64>),
    Each(Vec<Vec<f64>>),
}

impl PerGroupVector {
    pub fn get(&self, group: usize, axis: usize) -> f64 {
        let v = match self {
            PerGroupVector::Shared(v) => v,
            PerGroupVector::Each(vs) => &vs[group.min(vs.len() - 1)],
        };
        v.get(axis).copied().unwrap_or(0.0)
    }
}

impl Default for PerGroupVector {
    fn default() -> Self {
        PerGroupVector::Shared(Vec::new())
    }
}

/// Rational number used for quasiperiodic frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct Rational {
    pub num: i64,
    pub den: i64,
}

impl Rational {
    pub const DEFAULT_DENOMINATOR: i64 = 10_000_000_000;

    pub fn approximate(x: f64) -> Rational {
        let den = Self::DEFAULT_DENOMINATOR;
        Rational {
            num: (x * den as f64).round() as i64,
            den,
        }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl From<f64> for Rational {
    fn from(x: f64) -> Self {
        Rational::approximate(x)
    }
}

impl From<Rational> for f64 {
    fn from(r: Rational) -> f64 {
        r.value()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipticity {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diffusion {
    /// Centre of the scalar diffusion; defaults to the middle of the ellipticity window.
    pub mean: Option<PerGroup>,
    /// Modulation amplitude; defaults to zero.
    pub amplitude: Option<PerGroup>,
    /// Constant off-diagonal entry (two dimensions only).
    #[serde(default)]
    pub shear: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    #[serde(default)]
    pub mean: PerGroupVector,
    #[serde(default)]
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    /// Lower bound shared by the coupling strength and the weight floor.
    pub c_min: f64,
    /// Mean coupling matrix (defaults to zero before full coupling is enforced).
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Modulation amplitude of the diagonal entries.
    #[serde(default)]
    pub amplitude: f64,
    /// Mean weight matrix; defaults to the identity.
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lipschitz {
    pub bound: f64,
}

/// Distribution of per-cell values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellLaw {
    /// ±1 with equal probability.
    #[default]
    Binary,
    /// Uniform on [-1, 1].
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkerboard {
    /// Side length of one cell, in micro units.
    pub cell: f64,
    #[serde(default)]
    pub law: CellLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Periodic {
    #[serde(default = "one")]
    pub period: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quasiperiodic {
    pub frequencies: Vec<Rational>,
}

/// Complete description of a (possibly random) environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub dimension: usize,
    pub groups: usize,
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    pub ellipticity: Ellipticity,
    #[serde(default)]
    pub diffusion: Diffusion,
    #[serde(default)]
    pub drift: Drift,
    pub coupling: Coupling,
    pub lipschitz: Lipschitz,
    pub checkerboard: Option<Checkerboard>,
    pub periodic: Option<Periodic>,
    pub quasiperiodic: Option<Quasiperiodic>,
}

impl EnvironmentSpec {
    pub fn from_toml_str(text: &str) -> Result<EnvironmentSpec> {
        let spec: EnvironmentSpec =
            toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<EnvironmentSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("environment spec is always serialisable")
    }

    /// Static sanity of the description itself (not of a sampled field).
    pub fn check(&self) -> Result<()> {
        let cfg = |m: String| Err(LabError::Config(m));
        if !(1..=2).contains(&self.dimension) {
            return cfg(format!("dimension must be 1 or 2, got {}", self.dimension));
        }
        if self.groups == 0 {
            return cfg("groups must be at least 1".into());
        }
        if self.groups > MAX_GROUPS {
            return Err(LabError::UnsupportedSize(format!(
                "{} groups exceeds the maximum of {MAX_GROUPS}",
                self.groups
            )));
        }
        let e = &self.ellipticity;
        if !(e.min > 0.0 && e.min <= e.max && e.max.is_finite()) {
            return cfg(format!("ellipticity window [{}, {}] is invalid", e.min, e.max));
        }
        if !(self.coupling.c_min > 0.0 && self.coupling.c_min.is_finite()) {
            return cfg("coupling.c_min must be positive".into());
        }
        if !(self.lipschitz.bound > 0.0) {
            return cfg("lipschitz.bound must be positive".into());
        }
        for pg in [&self.diffusion.mean, &self.diffusion.amplitude].into_iter().flatten() {
            if !pg.len_ok(self.groups) {
                return cfg("per-group diffusion list has the wrong length".into());
            }
        }
        if self.dimension == 1 && self.diffusion.shear != 0.0 {
            return cfg("diffusion.shear requires dimension 2".into());
        }
        match &self.drift.mean {
            PerGroupVector::Shared(v) if !v.is_empty() && v.len() != self.dimension => {
                return cfg("drift.mean must have one entry per dimension".into())
            }
            PerGroupVector::Each(vs)
                if vs.len() != self.groups || vs.iter().any(|v| v.len() != self.dimension) =>
            {
                return cfg("per-group drift.mean has the wrong shape".into())
            }
            _ => {}
        }
        for (name, mat) in [("matrix", &self.coupling.matrix), ("sigma", &self.coupling.sigma)] {
            if let Some(mat) = mat {
                if mat.len() != self.groups || mat.iter().any(|r| r.len() != self.groups) {
                    return cfg(format!("coupling.{name} must be {0}×{0}", self.groups));
                }
            }
        }
        match self.kind {
            Kind::Checkerboard => match &self.checkerboard {
                Some(c) if c.cell > 0.0 => {}
                _ => return cfg("checkerboard kind needs checkerboard.cell > 0".into()),
            },
            Kind::Periodic => {
                if let Some(p) = &self.periodic {
                    if !(p.period > 0.0) {
                        return cfg("periodic.period must be positive".into());
                    }
                }
            }
            Kind::Quasiperiodic => match &self.quasiperiodic {
                Some(q) if !q.frequencies.is_empty() => {
                    if q.frequencies.iter().any(|r| r.den < MIN_FREQUENCY_DENOMINATOR) {
                        return cfg(format!(
                            "frequency denominators must be at least {MIN_FREQUENCY_DENOMINATOR}"
                        ));
                    }
                }
                _ => return cfg("quasiperiodic kind needs quasiperiodic.frequencies".into()),
            },
            Kind::Constant => {}
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        self.periodic.as_ref().map_or(1.0, |p| p.period)
    }

    /// Length scale over which the coefficients decorrelate or repeat.
    pub fn correlation_length(&self) -> f64 {
        match self.kind {
            Kind::Constant => 0.0,
            Kind::Periodic => self.period(),
            Kind::Checkerboard => self.checkerboard.as_ref().map_or(1.0, |c| c.cell),
            Kind::Quasiperiodic => self
                .quasiperiodic
                .as_ref()
                .map(|q| {
                    q.frequencies
                        .iter()
                        .map(|f| 1.0 / f.value().abs().max(1e-12))
                        .fold(0.0, f64::max)
                })
                .unwrap_or(1.0),
        }
    }

    /// Torus lengths must be multiples of this to keep the structure exact.
    pub fn torus_unit(&self) -> Option<f64> {
        match self.kind {
            Kind::Periodic => Some(self.period()),
            Kind::Checkerboard => self.checkerboard.as_ref().map(|c| c.cell),
            _ => None,
        }
    }

    pub fn diffusion_mean(&self, group: usize) -> f64 {
        self.diffusion
            .mean
            .as_ref()
            .map_or(0.5 * (self.ellipticity.min + self.ellipticity.max), |m| m.get(group))
    }

    pub fn diffusion_amplitude(&self, group: usize) -> f64 {
        self.diffusion.amplitude.as_ref().map_or(0.0, |a| a.get(group))
    }

    /// Mean coupling matrix after full coupling has been enforced: every
    /// group feeds its cyclic successor with strength at least `c_min`, and
    /// diagonals are raised as needed to keep row sums non-negative.
    pub fn coupling_mean(&self) -> Vec<Vec<f64>> {
        let m = self.groups;
        let mut c = self
            .coupling
            .matrix
            .clone()
            .unwrap_or_else(|| vec![vec![0.0; m]; m]);
        if m >= 2 {
            let cmin = self.coupling.c_min;
            for a in 0..m {
                let b = (a + 1) % m;
                if c[a][b] > -cmin {
                    c[a][b] = -cmin;
                }
            }
            for a in 0..m {
                let s: f64 = c[a].iter().sum();
                if s < 0.0 {
                    c[a][a] -= s;
                }
            }
        }
        c
    }

    pub fn sigma_mean(&self) -> Vec<Vec<f64>> {
        let m = self.groups;
        self.coupling.sigma.clone().unwrap_or_else(|| {
            (0..m)
                .map(|a| (0..m).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const CHECKER: &str = r#"
dimension = 1
groups = 2
kind = "checkerboard"
seed = 7
ellipticity = { min = 0.5, max = 2.5 }
diffusion = { mean = 1.5, amplitude = 0.5 }
coupling = { c_min = 0.5, matrix = [[1.0, -1.0], [-1.0, 1.0]] }
lipschitz = { bound = 100.0 }
checkerboard = { cell = 1.0 }
"#;

    #[test]
    fn parses_and_round_trips() {
        let spec = EnvironmentSpec::from_toml_str(CHECKER).unwrap();
        assert_eq!(spec.kind, Kind::Checkerboard);
        assert_eq!(spec.diffusion_mean(1), 1.5);
        let again = EnvironmentSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn unknown_keys_are_configuration_errors() {
        let bad = CHECKER.replace("seed = 7", "seed = 7\ncolour = 3");
        assert!(matches!(EnvironmentSpec::from_toml_str(&bad), Err(LabError::Config(_))));
    }

    #[test]
    fn too_many_groups_is_unsupported() {
        let bad = CHECKER
            .replace("groups = 2", "groups = 9")
            .replace(", matrix = [[1.0, -1.0], [-1.0, 1.0]]", "");
        assert!(matches!(EnvironmentSpec::from_toml_str(&bad), Err(LabError::UnsupportedSize(_))));
    }

    #[test]
    fn full_coupling_is_enforced_cyclically() {
        let text = CHECKER
            .replace("groups = 2", "groups = 3")
            .replace(", matrix = [[1.0, -1.0], [-1.0, 1.0]]", "");
        let spec = EnvironmentSpec::from_toml_str(&text).unwrap();
        let c = spec.coupling_mean();
        for a in 0..3 {
            assert_eq!(c[a][(a + 1) % 3], -0.5);
            assert!(c[a].iter().sum::<f64>() >= 0.0);
        }
    }

    #[test]
    fn frequencies_are_stored_as_fine_rationals() {
        let text = r#"
dimension = 1
groups = 1
kind = "quasiperiodic"
ellipticity = { min = 0.5, max = 2.5 }
coupling = { c_min = 0.5 }
lipschitz = { bound = 100.0 }
quasiperiodic = { frequencies = [1.0, 1.4142135623730951] }
"#;
        let spec = EnvironmentSpec::from_toml_str(text).unwrap();
        let f = &spec.quasiperiodic.unwrap().frequencies;
        assert!(f[1].den >= MIN_FREQUENCY_DENOMINATOR);
        assert!((f[1].value() - 2f64.sqrt()).abs() < 1e-9);
    }
}
