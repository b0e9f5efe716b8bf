//! Weakly supervised semantic segmentation from image-level labels: a small
//! convolutional backbone, a visual-words codebook (learned or memory-bank),
//! hybrid pooling, class activation maps and background-threshold pseudo
//! labels, plus the training loop and evaluation harness around them.

pub mod backbone;
pub mod cam;
pub mod codebook;
pub mod data;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod persist;
pub mod pooling;
pub mod training;

pub use error::{Error, Result};
