//! Learned layers on top of `dsdf-tensor`: linear and normalization layers,
//! multi-head attention, sinusoidal timestep embeddings, parameter storage
//! with Glorot initialization, and the Adam optimizer.

mod attention;
mod embedding;
mod error;
pub mod gradcheck;
mod layers;
mod optim;
mod params;

pub use attention::AttentionBlock;
pub use embedding::{timestep_embedding, timestep_embeddings};
pub use error::{NnError, Result};
pub use layers::{layer_norm, Activation, LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{glorot_bound, init_params, ParamId, ParamStore};
