//! A small CPU neural-network engine covering exactly what patch-wise
//! tumor-growth classifiers need: 3x3 / 1x1 convolutions, ceil-mode max
//! pooling, cross-channel LRN, ReLU, fully connected layers, inverted dropout,
//! softmax cross-entropy and momentum SGD. Multi-stream networks concatenate
//! their stream outputs along channels before a shared trunk.
//!
//! Everything is deterministic for a fixed seed: initialisation and dropout
//! draw from seeded ChaCha streams and all reductions run in a fixed order.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod sgd;
pub mod spec;
pub mod tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use checkpoint::Checkpoint;
pub use layers::{Layer, Param};
pub use loss::{softmax, softmax_xent, SoftmaxXent};
pub use network::Network;
pub use sgd::{sgd_step, SgdState, TrainConfig};
pub use spec::{InitScheme, LayerSpec, NetworkSpec, ShapeTrace, StreamSpec};
pub use tensor::{Real, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnetError> = std::result::Result<T, E>;
