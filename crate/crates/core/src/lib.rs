pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod layout;
pub mod losses;
pub mod sampler;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
