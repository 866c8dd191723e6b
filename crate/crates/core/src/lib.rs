//! Semi-supervised semantic segmentation with Mean Teacher consistency
//! regularization and colour augmentation, at desk scale.

pub mod augment;
pub mod consistency;
pub mod data;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
