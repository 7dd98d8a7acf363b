//! Numerical laboratory for weakly coupled systems of elliptic equations
//! posed on heterogeneous media.
//!
//! The crate is organised as a pipeline:
//!
//! * [`env`] builds coefficient fields (constant, periodic, quasiperiodic or
//!   random checkerboard) and checks the structural assumptions on them.
//! * [`discretize`] turns a field into sparse block operators and solves
//!   linear systems.
//! * [`eig`] computes principal eigenpairs on dilated domains and their
//!   logarithmic (Hopf–Cole) transforms.
//! * [`cell`] solves the discounted ("δ") cell problem on large tori.
//! * [`effham`] estimates the effective Hamiltonian and the critical value.
//! * [`lab`] wires the above into reproducible experiments and reports.

pub mod cell;
pub mod discretize;
pub mod effham;
pub mod eig;
pub mod env;
pub mod error;
pub mod lab;
pub mod linalg;
pub(crate) mod numerics;

pub use error::{LabError, Result};
