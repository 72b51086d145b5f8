//! Spherical spectral neural operator surrogate for solar-wind radial velocity,
//! with the HUX-f upwind baseline, synthetic data generation and the
//! evaluation metric suite.

pub mod benchmark;
pub mod dataio;
pub mod error;
pub mod grid;
pub mod hux;
pub mod metrics;
pub mod rollout;
pub mod sfno;
pub mod sht;
pub mod training;

pub use error::{Error, Result};
