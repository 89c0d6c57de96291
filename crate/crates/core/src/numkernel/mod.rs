//! Dense `f64` tensors, a reverse-mode tape, the layer zoo, AdamW and the
//! binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{
    attention_head, glu, graph_conv, gru_cell, mlp, normalized_adjacency, selective_ssm_scan,
    Activation, AttentionHead, EncoderBlock, GraphConv, Gru, GruCell, Glu, LayerNorm, Linear, Mlp,
    SelectiveScan,
};
pub use params::{AdamW, CosineSchedule, ParamId, ParamStore};
pub use tape::{Gradients, ParamGrads, Tape, Unary, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("optimizer step without accumulated gradients")]
    MissingGradient,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
