//! Numerical lab for reservoir-driven nonlinear diffusions: steady
//! profiles, the linearised generator, static covariances and their
//! long-range part, and a Langevin ensemble with statistical checks.

pub mod covariance;
pub mod error;
pub mod fvm;
pub mod linalg;
pub mod linop;
pub mod mesh;
pub mod par;
pub mod rng;
pub mod spde;
pub mod stats;
pub mod steady;
pub mod thermo;

pub use error::{Error, Result};
pub use mesh::Mesh1D;
pub use thermo::ThermoModel;
