//! Minimal neural-network toolkit over `candle-core` tensors: parameter
//! groups, layers, Adam, and a snapshot container.

pub mod layers;
pub mod optim;
pub mod params;
pub mod snapshot;

pub use candle_core::DType;
pub use layers::{
    leaky_relu, log_softmax_last, masked_mean, masked_softmax, randn, scalar, sigmoid,
    softmax_last, to_f64_vec, BiLstm, Conv2d, Ctx, Embedding, GruCell, LayerNorm, Linear, LstmCell,
    MultiHeadAttention,
};
pub use optim::{Adam, AdamState};
pub use params::{Builder, Init, ParamStore};
pub use snapshot::Snapshot;
