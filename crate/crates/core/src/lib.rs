//! Desk-scale MelBERT-style metaphor detection: a small transformer encoder
//! trained from scratch, with metaphor identification heads, ablations,
//! baselines, and evaluation tooling.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod heads;
pub mod input;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
