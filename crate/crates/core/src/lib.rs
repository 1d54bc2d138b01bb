//! Simulation and numerical certification of Lyapunov conditions for
//! uncertain retarded functional differential equations.

pub mod certify;
pub mod comparison;
pub mod converse;
pub mod dini;
pub mod error;
pub mod functionals;
pub mod harness;
pub mod history;
pub mod signals;
pub mod integrator;
pub mod system;

pub use error::{Error, Result};
