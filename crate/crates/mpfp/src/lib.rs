//! Dataset generation, training, evaluation and the `mpfp` command line
//! built on `mpfp-core`.

mod error;

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
