//! Within-host viral dynamics with stochastic early-phase time shifts.

pub mod branching;
pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod ode;
pub mod optimize;
pub mod quadrature;
pub mod rng;
pub mod ssa;
pub mod surrogate;
pub mod timeshift;

pub use error::{Error, Result};
pub use model::{Hyperparams, ModelParams, Reaction, State};
