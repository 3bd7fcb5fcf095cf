pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod discriminator;
mod error;
pub mod generator;
pub mod metrics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
