//! Sparse keyword decoding from vision-aligned embeddings.

pub mod cli;
pub mod dataset;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod prompting;
pub mod refiner;
pub mod retrieval;
pub mod trainer;
pub mod vocabulary;

pub use error::{Error, Result};
