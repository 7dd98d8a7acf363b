//! Environments: declarative specs, sampled realizations and assumption checks.

mod field;
mod spec;
mod validate;

pub use field::{sample_realization, shift_field, CoefficientField, FieldConstants, FieldSamples};
pub use spec::{
    CellLaw, Checkerboard, Coupling, Diffusion, Drift, Ellipticity, EnvironmentSpec, Kind,
    Lipschitz, PerGroup, PerGroupVector, Periodic, Quasiperiodic, Rational, MAX_GROUPS,
    MIN_FREQUENCY_DENOMINATOR,
};
pub use validate::{
    validate_samples, AssumptionMargin, ValidationReport, BOUNDS, DIAGONAL_DOMINANCE,
    ELLIPTICITY, FULL_COUPLING, WEIGHTS,
};

use crate::error::Result;

/// Checks every structural assumption on a realization and reports margins.
pub fn validate_assumptions(field: &CoefficientField) -> Result<ValidationReport> {
    field.validate()
}
