//! Numerical laboratory for stochastic interacting particle systems with
//! logarithmic/Riesz repulsion, the matching mean-field PDE on a periodic box,
//! and modulated-energy diagnostics that couple the two.
//!
//! The crate is organized around five subsystems:
//!
//! * [`potentials`] — exact kernel evaluation (value, gradient, Laplacian,
//!   Fourier symbol), smooth truncation, sphere smearing, and a numerical
//!   admissibility checker for the kernel/flow-matrix assumptions.
//! * [`sde`] — Euler–Maruyama integration of the N-particle system with
//!   counter-based reproducible noise, collision monitoring, and ensembles.
//! * [`pde`] — pseudospectral solver for the aggregation-diffusion equation
//!   with Strang splitting and Carlen–Loss decay diagnostics.
//! * [`energy`] — the modulated energy, its truncated and smeared variants,
//!   and the Laplacian/commutator terms of its stochastic differential
//!   inequality.
//! * [`harness`] — ensemble experiments: convergence rates in N, decay-bound
//!   tables, and the expected-value functional inequality.

pub mod energy;
pub mod flow;
pub mod grid;
pub mod harness;
pub mod pde;
pub mod potentials;
pub mod rng;
pub mod sde;
pub mod spectral;
pub mod util;

pub use flow::FlowMatrix;
pub use grid::{GridDensity, InitialLaw};
pub use potentials::{KernelKind, PotentialSpec, SmearingRadius, TruncationParams};

use thiserror::Error;

/// Crate-wide error type. Numerical routines are strict about their
/// preconditions; failures carry enough context to reproduce the call.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("CFL violation: max |u| = {max_u:.6e} requires dt <= {dt_max:.6e}, got dt = {dt:.6e}")]
    Cfl { max_u: f64, dt: f64, dt_max: f64 },

    #[error("non-finite state: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
