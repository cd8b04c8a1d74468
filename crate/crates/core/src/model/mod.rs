//! Encoder-decoder transformer with type embeddings, sinusoidal encoder
//! positions and learned hard/soft decoder positions.
//!
//! The forward pass keeps every intermediate needed by the hand-written
//! reverse pass in [`transformer::backward`]. Both run over any [`Scalar`];
//! training uses `f32` and gradient checking `f64`.

mod checkpoint;
mod decode;
mod layers;
mod loss;
mod params;
mod tensor;
pub mod transformer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use decode::{greedy_decode, greedy_decode_batch, Decoded};
pub use loss::{label_smoothed_loss, LossOutput};
pub use params::{Attention, DecoderLayer, EncoderLayer, FeedForward, Linear, ModelParams, Norm};
pub use tensor::{gemm, Scalar, Tensor, View};
pub use transformer::{backward, decode_forward, encode_forward, forward, Batch, ForwardCache, RunMode};

use thiserror::Error;

use crate::samplegen::{PretrainSample, MAX_SAMPLE_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("soft position {pos} outside encoder length {len}")]
    SoftPositionOutOfRange { pos: usize, len: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("type id {0} outside the type table")]
    TypeOutOfRange(u32),
    #[error("every target position is padding")]
    AllPositionsPadded,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_types: usize,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Defaults for the given vocabulary and type-table sizes.
    pub fn new(vocab_size: usize, n_types: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn_dim: 512,
            dropout: 0.1,
            max_len: 64,
            vocab_size,
            n_types,
            label_smoothing: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < MAX_SAMPLE_LEN {
            return bad(format!("max_len must be at least {MAX_SAMPLE_LEN}"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".into());
        }
        if self.vocab_size == 0 || self.n_types == 0 || self.ffn_dim == 0 {
            return bad("vocab_size, n_types and ffn_dim must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "d_model={}\nn_heads={}\nenc_layers={}\ndec_layers={}\nffn_dim={}\ndropout={}\nmax_len={}\nvocab_size={}\nn_types={}\nlabel_smoothing={}\n",
            self.d_model,
            self.n_heads,
            self.enc_layers,
            self.dec_layers,
            self.ffn_dim,
            self.dropout,
            self.max_len,
            self.vocab_size,
            self.n_types,
            self.label_smoothing
        )
    }

    /// Applies one `key=value` setting. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
        }
        match key {
            "d_model" => self.d_model = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "enc_layers" => self.enc_layers = p(key, value)?,
            "dec_layers" => self.dec_layers = p(key, value)?,
            "ffn_dim" => self.ffn_dim = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "n_types" => self.n_types = p(key, value)?,
            "label_smoothing" => self.label_smoothing = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// True when parameters of `other` can be loaded into this architecture.
    pub fn same_shapes(&self, other: &ModelConfig) -> bool {
        self.d_model == other.d_model
            && self.n_heads == other.n_heads
            && self.enc_layers == other.enc_layers
            && self.dec_layers == other.dec_layers
            && self.ffn_dim == other.ffn_dim
            && self.max_len == other.max_len
            && self.vocab_size == other.vocab_size
            && self.n_types == other.n_types
    }
}

/// Component `2i` is `sin(pos / 10000^(2i/d))`, component `2i+1` the cosine.
pub fn sinusoidal_pe(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = position as f64 / 10000f64.powf(i2 / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// One model input/target pair, independent of where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub enc_tokens: Vec<u32>,
    pub enc_types: Vec<u32>,
    pub dec_tokens: Vec<u32>,
    pub dec_types: Vec<u32>,
    pub dec_hard_pos: Vec<u32>,
    pub dec_soft_pos: Vec<u32>,
    pub targets: Vec<u32>,
}

impl From<&PretrainSample> for Example {
    fn from(s: &PretrainSample) -> Self {
        Example {
            enc_tokens: s.enc_tokens.clone(),
            enc_types: s.enc_types.clone(),
            dec_tokens: s.dec_in_tokens.clone(),
            dec_types: s.dec_in_types.clone(),
            dec_hard_pos: s.dec_hard_pos.clone(),
            dec_soft_pos: s.dec_soft_pos.clone(),
            targets: s.target_tokens.clone(),
        }
    }
}

impl Example {
    /// Translation pair: encoder `[bos] src [eos]`, decoder input `[bos] tgt`,
    /// target `tgt [eos]`. Soft positions are zero (unused when fine-tuning).
    pub fn translation(src: &[u32], src_type: u32, tgt: &[u32], tgt_type: u32) -> Self {
        use crate::tokenizer::{BOS, EOS};
        let mut enc_tokens = Vec::with_capacity(src.len() + 2);
        enc_tokens.push(BOS);
        enc_tokens.extend_from_slice(src);
        enc_tokens.push(EOS);
        let mut dec_tokens = Vec::with_capacity(tgt.len() + 1);
        dec_tokens.push(BOS);
        dec_tokens.extend_from_slice(tgt);
        let mut targets = tgt.to_vec();
        targets.push(EOS);
        let n = targets.len();
        Example {
            enc_types: vec![src_type; enc_tokens.len()],
            enc_tokens,
            dec_tokens,
            dec_types: vec![tgt_type; n],
            dec_hard_pos: (0..n as u32).collect(),
            dec_soft_pos: vec![0; n],
            targets,
        }
    }
}
