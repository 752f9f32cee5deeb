//! Discriminator-weighted imitation from mixed-quality demonstrations.

pub mod config;
pub mod datasets;
pub mod density;
pub mod discriminator;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod nn;
pub mod offline;
pub mod online;
pub mod parallel;
pub mod policy;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
