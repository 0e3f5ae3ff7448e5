//! Few-shot meta-learning for binary cell segmentation in microscopy images.
//!
//! A segmentation network is meta-trained on several annotated source
//! domains so that a handful of labeled images from a new target domain is
//! enough to fine-tune it. See the crate README for the command-line tool.

pub mod adapt;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod meta;
pub mod models;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
