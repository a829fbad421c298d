//! Cloud-structure segmentation with an EfficientNet encoder and a UNet
//! decoder, plus the surrounding toolkit: Dice scoring and losses, RAdam,
//! run-length encoded submissions, joint image/mask augmentation and
//! dataset handling.

pub mod augment;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod params;
pub mod radam;
pub mod rle;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
