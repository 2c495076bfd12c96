pub mod cli;
pub mod coverage;
pub mod ctmc;
pub mod distfit;
pub mod error;
pub mod estimate;
pub mod identify;
pub mod kde;
pub mod residuals;
pub mod rng;
pub mod scenarios;
pub mod sir;
pub mod stats;
pub mod studies;
pub mod svg;
pub mod synth;

pub use error::{Error, Result};
