pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scores;
pub mod synthdata;
pub mod translator;

pub use error::{Error, Result};
