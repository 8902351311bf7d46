//! Desk-scale data-assimilation testbed: a two-layer quasi-geostrophic
//! channel model, a stochastic ensemble Kalman filter, and the hybrid filter
//! that estimates background covariance from a large surrogate ensemble.

pub mod assimilation;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod qg;
pub mod rng;
pub mod spectral;
pub mod surrogate;

pub use error::{Error, Result};
pub use qg::{QgModel, QgParams, SolverState};
pub use spectral::{Grid, LayeredField, PvAnomaly, Representation};
