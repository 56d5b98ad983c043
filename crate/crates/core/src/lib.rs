//! Self-supervised prototypical pre-training and prototype-initialized
//! fine-tuning for few-shot image classification.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod gradcheck;
pub mod protoclr;
pub mod rng;

pub use error::{Error, Result};
