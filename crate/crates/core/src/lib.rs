pub mod backbone;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod failure;
pub mod generator;
pub mod image;
pub mod losses;
pub mod nn;
pub mod perceptual;
pub mod processor;
pub mod render;
pub mod resample;
pub mod sobel;
pub mod stain;
pub mod training;

pub use error::{Error, Result};
