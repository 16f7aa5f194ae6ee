//! Multi-task self-supervised pretraining of a 3D Swin Transformer for brain MRI.

pub mod error;
pub mod radiomics;
pub mod rng;
pub mod voldata;

pub use error::{Error, Result};
pub mod augment;
pub mod nn;
pub mod swin;
pub mod heads;
pub mod losses;
pub mod config;
pub mod downstream;
pub mod pretrain;
