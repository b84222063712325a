//! Flow-based semi-supervised generative classification of embedding vectors,
//! with a conditional mixture baseline, evaluation metrics and a synthetic
//! corpus generator.

pub mod base;
pub mod distributions;
pub mod error;
pub mod flow;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod synthcorpus;
pub mod tacospawn;

pub use error::{Error, Result};
pub use matrix::Matrix;
