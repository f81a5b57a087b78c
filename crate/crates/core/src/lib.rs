pub mod checkpoint;
pub mod cli;
pub mod compositor;
pub mod error;
pub mod evalkit;
pub mod flowtrain;
pub mod latentcodec;
pub mod layernet;
pub mod nn;
pub mod objective;
pub mod synthgen;

pub use error::{Error, Result};
