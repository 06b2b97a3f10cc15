//! Desk-scale laboratory for hierarchical control of stochastic heat equations.
//!
//! The library discretizes one-dimensional forward and backward stochastic heat
//! equations on an exact binomial noise lattice. On that lattice conditional
//! expectations are two-point averages and every forward/backward duality
//! pairing is an algebraic identity, so the classical control-theoretic
//! machinery can be certified to solver precision instead of O(dt):
//!
//! * [`lattice`] — the binomial filtered probability space and adapted fields;
//! * [`grid`] — the Dirichlet spatial grid, masks, and tridiagonal solves;
//! * [`spde`] — forward/backward linear SPDE steppers (exact transposes of
//!   each other);
//! * [`nash`] — the follower layer: matrix-free Nash operator, GMRES solve,
//!   stationarity verification, coercivity probes;
//! * [`coupled`] — the four coupled primal/adjoint systems and duality gaps;
//! * [`hum`] — the leader layer: dual functionals, proximal-gradient
//!   minimization, control extraction, certificates;
//! * [`carleman`] — singular weight families, weighted energies, empirical
//!   observability and unique-continuation probes;
//! * [`scenario`] / [`experiments`] — configuration, orchestration, and
//!   reporting for the `snctl` command-line front end.

pub mod carleman;
pub mod coupled;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod hum;
pub mod krylov;
pub mod lattice;
pub mod nash;
mod par;
pub mod scenario;
pub mod spde;

pub use error::Error;
