//! Artifact-suppressing 4× GAN super-resolution.
//!
//! The crate bundles a small reverse-mode autodiff engine, the RRDB
//! generator and deep discriminator, the artifact removal module (DoG blob
//! detection on the SR/HR residual), training with checkpoint/resume, and
//! the evaluation and downstream-classifier harnesses.

pub mod arm;
pub mod autograd;
pub mod classifier;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod kernels;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;
