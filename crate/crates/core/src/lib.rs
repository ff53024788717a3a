//! Visual prompt tuning of a frozen hierarchical transformer for binary
//! segmentation, guided by differentiable soft-SLIC superpixels, patch
//! embeddings and a learned attention prompt over raw image patches.
//!
//! Everything runs on a small reverse-mode tape ([`tensor::Tape`]) in `f64`.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod metrics;
pub mod prompting;
pub mod superpixel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
