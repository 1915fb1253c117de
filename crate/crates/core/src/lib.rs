pub mod cli;
pub mod embed;
pub mod env;
pub mod error;
pub mod numcore;
pub mod policy;
pub mod rng;
pub mod state;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
