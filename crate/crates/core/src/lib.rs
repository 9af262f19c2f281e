//! BEV map segmentation with a residual graph convolution (RGC) block.
//!
//! The crate carries its own small tensor type and reverse-mode autodiff,
//! the RGC block and the surrounding encoder/head network, joint
//! feature/mask augmentation, a procedural scene generator, training and
//! IoU evaluation.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod render;
pub mod rgc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
