//! Geometry-aligned video flow matching on a synthetic box world.

pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod teacher;
pub mod training;
pub mod worldgen;

pub use config::Config;
pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
