//! Nonlinear-transform source-channel coding with a checkerboard context
//! entropy model, entropy-guided variable-rate JSCC and per-image online
//! adaptation.

pub mod adapt;
pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod image;
pub mod jscc;
pub mod model;
pub mod nn;
pub mod params;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
