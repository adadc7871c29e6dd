//! Probabilistic model predictive control with Gaussian-process dynamics.

pub mod config;
pub mod cost;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod features;
pub mod gp;
pub mod io;
pub mod jet;
pub mod linalg;
pub mod moments;
pub mod planner;
pub mod rl;
#[doc(hidden)]
pub mod testing;
pub mod verify;

pub use error::{Error, Result};
