pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod damma;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod latent;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
