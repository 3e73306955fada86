//! Speaker/follower navigation models and the follower-aware speaker trainer.

pub mod error;
pub mod follower;
pub mod io;
pub mod language;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod speaker;
pub mod trainer;
pub mod world;

pub use error::{Error, ErrorKind, Result};
