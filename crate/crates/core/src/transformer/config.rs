use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// How per-position encoder outputs are reduced to one vector per entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
    Max,
}

/// The decoder's own input sequence during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderInput {
    /// The masked sequence also fed to the encoder.
    #[default]
    Masked,
    /// Only the position scalar of each real step; everything else must come
    /// through the cross-attention memory.
    Positions,
}

impl std::str::FromStr for DecoderInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(DecoderInput::Masked),
            "positions" => Ok(DecoderInput::Positions),
            other => Err(Error::Config(format!("unknown decoder input `{other}`"))),
        }
    }
}

/// What the decoder's cross-attention reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Memory {
    /// Per-position encoder outputs.
    Sequence,
    /// A single slot holding ν_E mapped back to the hidden width.
    #[default]
    Embedding,
    /// Both of the above.
    Both,
}

impl std::str::FromStr for Memory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(Memory::Sequence),
            "embedding" => Ok(Memory::Embedding),
            "both" => Ok(Memory::Both),
            other => Err(Error::Config(format!("unknown decoder memory `{other}`"))),
        }
    }
}

/// Masking scheme for pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Each real position is masked independently with probability `mask_p`.
    #[default]
    Bernoulli,
    /// Exactly `round(mask_p · len)` real positions per sequence.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Sequence length (most recent activities kept per entity).
    pub t: usize,
    pub mask_p: f64,
    pub emb_out: usize,
    pub precision: Precision,
    pub pooling: Pooling,
    pub mask_mode: MaskMode,
    pub memory: Memory,
    pub decoder_input: DecoderInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            ff_dim: 32,
            layers: 6,
            heads: 8,
            dropout: 0.1,
            t: 15,
            mask_p: 0.3,
            emb_out: 16,
            precision: Precision::F32,
            pooling: Pooling::Mean,
            mask_mode: MaskMode::Bernoulli,
            memory: Memory::default(),
            decoder_input: DecoderInput::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.ff_dim == 0 || self.emb_out == 0 || self.t == 0 {
            return Err(Error::Config("ff_dim, emb_out and t must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_p) {
            return Err(Error::Config(format!("mask_p {} not in [0, 1]", self.mask_p)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Per-head key/query width.
    pub fn d_k(&self) -> usize {
        self.hidden / self.heads
    }
}
