//! Convolutional down-sampler, transformer encoder and the shared decoder
//! that scores both decoding orders.

mod config;
pub mod layers;
mod model;
mod params;

pub use config::ModelConfig;
pub use layers::{multi_head_attention, Attention, AttnDims, AttnMask, Dropout};
pub use model::{repeat_memory, FeatureBatch, Memory, Model, TokenBatch};
pub use params::{BoundParams, ParamStore};
