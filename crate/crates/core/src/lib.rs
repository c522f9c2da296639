pub mod cli;
pub mod engine;
pub mod error;
pub mod permutation;
pub mod planner;
pub mod structure;
pub mod train;

pub use error::{Error, Result};
