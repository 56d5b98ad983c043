//! Random image transforms and named augmentation pipelines.

mod image;
mod pipeline;
pub mod transforms;

pub use image::{batch_tensor, hsv_to_rgb, rgb_to_hsv, Image, MAX_SIDE};
pub use pipeline::{AugmentationPipeline, Transform};
