//! Miniature pre-norm transformer encoder-decoder with class-private
//! bottleneck adapters.

mod adapter;
mod checkpoint;
mod decode;
mod infer;
mod transformer;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use qrw_tensor::TensorError;

pub use adapter::{count_adapter_params, BART_BASE_PARAMS, param_ratio, Adapter, AdapterKey, AdapterSet, Slot};
pub use checkpoint::{
    fingerprint_store, load_adapters, load_base, read_params, save_adapters, save_base, write_params, Fingerprint,
    Parsed,
};
pub use decode::{beam_decode, greedy_decode, log_softmax_row, Hypothesis, ModelScorer, StepScorer};
pub use infer::{CrossCache, DecoderCache, Incremental};
pub use transformer::{
    adapter_forward, decode_step, encode, pool_states, BaseWeights, BoundModel, Dropout, EncoderOutput, Model,
    PaddedBatch, Skeleton,
};
pub use vocab::{assemble_source, assemble_target, Example, Vocab, END, PAD, SEP, START, UNK};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OovToken { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub adapter_bottleneck: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.into()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.adapter_bottleneck == 0 {
            return fail("adapter bottleneck must be at least 1");
        }
        if self.vocab_size <= UNK {
            return fail("vocabulary must hold the special tokens");
        }
        if self.max_seq_len == 0 || self.ffn_dim == 0 {
            return fail("max_seq_len and ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Gradient-check scale: d=8, b=4, two layers each side, 11 tokens.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 16,
            adapter_bottleneck: 4,
            max_seq_len: 16,
            dropout: 0.0,
        }
    }

    /// BART-base geometry with the given adapter bottleneck.
    pub fn bart_base(adapter_bottleneck: usize) -> Self {
        Self {
            vocab_size: 50265,
            d_model: 768,
            n_heads: 12,
            n_enc_layers: 6,
            n_dec_layers: 6,
            ffn_dim: 3072,
            adapter_bottleneck,
            max_seq_len: 1024,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
