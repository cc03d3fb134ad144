//! Encoder-decoder transformer over activity sequences.
//!
//! Each position enters as `concat(i/t, z-scored numericals, categorical
//! embeddings)`, linearly projected to the hidden width. Encoder blocks are
//! {self-attention, FFN}; decoder blocks are {causal self-attention,
//! cross-attention over the encoder output, FFN}; every sublayer is wrapped as
//! `LayerNorm(x + dropout(sublayer(x)))`. Entity embeddings pool the encoder
//! output over real positions, append the static attributes and pass through
//! two dense layers.

mod attention;
mod batch;
mod config;
mod model;
mod weights;

pub use attention::{scaled_dot_attention, AttentionOutput};
pub use batch::{AttnMask, MaskPlan, SeqBatch};
pub use config::{DecoderInput, MaskMode, Memory, ModelConfig, Pooling, Precision};
pub use model::{Bound, EmbeddingRecord, ForwardCtx, Model, Predictions};
pub use weights::{statics_width, step_width, ModelWeights};
