//! Numerical tools for nonlocal balance equations: transport-metric geometry
//! on finite nonnegative measures, lattice approximations of the dynamics,
//! particle representations, and a mean-field Markov-chain simulator, together
//! with a cross-validation harness tying the solvers to each other.

pub mod error;
pub mod harness;
pub mod measures;
pub mod lattice;
pub mod ode;
pub mod problem;
pub mod stochastic;
pub mod superposition;

pub use error::{BalanceError, Result};
