//! Error types shared across the crate.

use thiserror::Error;

/// Errors from lattice construction and per-level operators.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum LatticeError {
    #[error("step count {steps} out of range (1..={max})")]
    StepsOutOfRange { steps: usize, max: usize },
    #[error("horizon must be positive, got {0}")]
    NonpositiveHorizon(f64),
    #[error("level {level} out of range for a field with {levels} levels")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("field shape mismatch: {0}")]
    Shape(String),
}

/// Errors from spatial-grid operators and direct solves.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 3 interior points, got {0}")]
    TooFewPoints(usize),
    #[error("domain length must be positive, got {0}")]
    NonpositiveLength(f64),
    #[error("vector length {got} does not match {expected} interior points")]
    Shape { got: usize, expected: usize },
    #[error("tridiagonal system singular at row {row} (pivot {pivot:.3e})")]
    SingularSystem { row: usize, pivot: f64 },
    #[error("index range {lo}..={hi} outside 1..={n}")]
    BadRange { lo: usize, hi: usize, n: usize },
}

/// Errors from the SPDE steppers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpdeError {
    #[error("stability guard violated: dt*sup|a1| = {0:.3e} >= 1")]
    StabilityGuard(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Errors from iterative solvers (Krylov loops, coupled sweeps, minimizers).
#[derive(Debug, Clone, Error)]
pub enum SolverError {
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("coupled sweep diverged after {sweeps} sweeps (residual {residual:.3e}); increase the control penalties")]
    CouplingDiverged { sweeps: usize, residual: f64 },
    #[error(transparent)]
    Spde(#[from] SpdeError),
}

/// Errors from scenario files and validation.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Spde(#[from] SpdeError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
