//! Face destylization: a convolutional encoder / fully-connected bottleneck /
//! deconvolutional decoder generator trained against a discriminator with
//! RMSprop, plus procedural paired data and PSNR/SSIM/retrieval evaluation.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use error::{FdnnError, Result};
pub use tensor::Tensor;
