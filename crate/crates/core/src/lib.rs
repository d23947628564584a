//! TBC-Net: infrared small-target extraction with a semantic-constraint
//! training signal, plus the synthetic data factory, detector and
//! evaluation metrics around it.

pub mod detect;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod scm;
pub mod synth;
pub mod tem;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use image::{GrayImage, PgmDepth, ScoreMap};
pub use rng::Rng;
pub use tensor::Tensor;
