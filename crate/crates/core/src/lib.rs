//! Anchor-free one-stage object detection with a shared encoder-decoder
//! feature enhancer and semantic-revised box decoding.

pub mod assign;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod render;
pub mod sedam;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Detector, ModelConfig, Variant};
pub use tensor::Tensor;
