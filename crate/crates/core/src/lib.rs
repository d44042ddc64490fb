//! Semi-explicit symplectic integrators for nonseparable stochastic
//! Hamiltonian systems.

pub mod baseline;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod modelzoo;
pub mod nls;
pub mod noise;
pub mod project;
pub mod splitflow;

pub use error::{Error, Result};
pub use model::{ExtendedState, HamiltonianModel, PhaseState};
pub use noise::{NoiseGrid, StepIncrements};
