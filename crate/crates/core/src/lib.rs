//! Numerical contact geometry and kinetics of stochastic vector bundles.
//!
//! The extended phase space carries coordinates `(t, y^1..y^n, wp_1..wp_n)`
//! where `y` is a state realization and `wp` is the probability flux
//! conjugate to it. The crate provides:
//!
//! - [`forms`]: sparse exterior algebra over phase-space coordinates, the
//!   contact form `H dt - wp_i dy^i`, and numerical certification of the
//!   contact structure (non-vanishing volume form, trivial joint kernel).
//! - [`dynamics`]: Poisson brackets, the contact vector field, fixed-step
//!   RK4 integration of the contact dynamical equations, and conservation
//!   diagnostics for the constraint `eps = wp_i ydot^i - H`.
//! - [`kinetic`]: finite-difference solver for the truncated kinetic
//!   equation `dP/dt = L P`, stationary second-order solutions, and jet
//!   prolongation of grid densities.
//! - [`transport`]: line integrals of flux covector fields along paths,
//!   loop holonomy, and path-dependence experiments.
//! - [`cumulants`]: reproducible path ensembles, joint cumulant estimation
//!   with jackknife errors, and assembly of generator/flux coefficients.
//! - [`variational`]: the discrete constraint action, its first variation,
//!   and descent to stationary paths.

pub mod cumulants;
pub mod dynamics;
pub mod error;
pub mod forms;
pub mod hamiltonians;
pub mod kinetic;
pub mod multi_index;
pub mod phase;
pub mod rng;
pub mod transport;
pub mod variational;

pub use error::{Error, Result};
pub use phase::{
    Coordinate, CoordinateKind, Hamiltonian, PhaseGradient, PhasePoint, TangentVector,
};
