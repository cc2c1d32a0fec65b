//! Semi-supervised image classification with gradient-based data
//! augmentation, mixup variants, an aggregation/separation regularizer and
//! snapshot-averaged training.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gda;
pub mod gradcheck;
pub mod inner;
pub mod mixup;
pub mod network;
pub mod objective;
pub mod ppm;
pub mod principal;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
