//! Noise-robust object detection at desk scale: a sample-weighted detection
//! loss, curriculum multi-class boosting of detectors (a noise-eliminating
//! stage followed by a noise-learning stage), and a diversity-driven
//! selective ensemble, exercised on synthetic scenes with injected
//! annotation noise.

pub mod cma;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod tinynet;

pub use error::{Error, Result};
pub use geometry::{Box, Detection, GroundTruthObject};
pub use tensor::Tensor;
