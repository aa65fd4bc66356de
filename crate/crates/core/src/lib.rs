pub mod cli;
pub mod config;
pub mod cuts;
pub mod engine;
pub mod error;
pub mod lower_level;
pub mod metrics;
pub mod network;
pub mod problem;
pub mod problems;
pub mod rng;
pub mod scheduler;
pub mod validate;
pub mod vecops;

pub use error::{ArgusError, Result};
