//! Conv-4 embedding network and its optimizer.

mod adam;
mod conv4;

pub use adam::{AdamConfig, AdamState};
pub use conv4::{ConvBlock, EmbeddingNetwork, Forward, BLOCKS, FILTERS, MIN_INPUT_SIZE};
