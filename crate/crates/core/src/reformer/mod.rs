//! Reformer building blocks: shared-QK LSH attention, reversible residual
//! layers and chunked feed-forward sublayers, with dense attention as the
//! exact reference.

pub mod attention;
pub mod layer;
pub mod lsh;
pub mod reversible;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::mix;
use crate::numerics::RngStream;

pub use attention::{attend, query_scores, query_weights, AttentionProbs, Candidates};
pub use layer::{chunked_ffn, init_layer, init_stack, LayerValues, LayerVars};
pub use lsh::{lsh_bucket, BucketAssignment};
pub use reversible::{
    reformer_stack, reversible_backward, reversible_forward, reversible_inverse, Backprop,
    LayerCache, StackOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Lsh,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_hash_rounds: usize,
    /// Fixed bucket count; `None` picks `max(2, n / bucket_chunk_size)` rounded to even.
    pub n_buckets: Option<usize>,
    pub bucket_chunk_size: usize,
    pub causal: bool,
    pub kind: AttentionKind,
    /// A query never attends to itself unless it has no other target.
    pub self_exclusion: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            model_dim: 256,
            n_heads: 8,
            n_hash_rounds: 2,
            n_buckets: None,
            bucket_chunk_size: 16,
            causal: false,
            kind: AttentionKind::Lsh,
            self_exclusion: true,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if let Some(b) = self.n_buckets {
            if b < 2 || b % 2 != 0 {
                return Err(Error::Config(format!("n_buckets must be even and >= 2, got {b}")));
            }
        }
        if self.n_hash_rounds == 0 || self.bucket_chunk_size == 0 {
            return Err(Error::Config(
                "n_hash_rounds and bucket_chunk_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn buckets_for(&self, n_valid: usize) -> usize {
        self.n_buckets
            .unwrap_or_else(|| lsh::auto_bucket_count(n_valid, self.bucket_chunk_size))
    }
}

/// One Reformer layer: attention sublayer plus feed-forward sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub attention: AttentionConfig,
    pub ff_dim: usize,
    pub ffn_chunk_size: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            attention: AttentionConfig::default(),
            ff_dim: 2048,
            ffn_chunk_size: 64,
            dropout: 0.1,
            ln_eps: 1e-12,
        }
    }
}

impl LayerConfig {
    pub fn model_dim(&self) -> usize {
        self.attention.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.ff_dim == 0 || self.ffn_chunk_size == 0 {
            return Err(Error::Config("ff_dim and ffn_chunk_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Which rows form independent sequences, and which rows are real tokens.
///
/// Attention never crosses a segment boundary, so several sentences can share
/// one call. Segment `s` hashes with its own stream, making a sentence's
/// output independent of what else is packed with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub mask: Vec<bool>,
    pub segments: Vec<Range<usize>>,
}

impl Layout {
    /// One segment with the given validity mask.
    pub fn single(mask: Vec<bool>) -> Self {
        let n = mask.len();
        Layout {
            mask,
            segments: vec![0..n],
        }
    }

    pub fn all_valid(n: usize) -> Self {
        Self::single(vec![true; n])
    }

    /// Back-to-back segments of the given lengths, all valid.
    pub fn packed(lens: &[usize]) -> Self {
        Self::padded(lens, lens)
    }

    /// Segment `i` spans `widths[i]` rows of which the first `lens[i]` are valid.
    pub fn padded(lens: &[usize], widths: &[usize]) -> Self {
        let mut mask = Vec::new();
        let mut segments = Vec::with_capacity(lens.len());
        for (&l, &w) in lens.iter().zip(widths) {
            let start = mask.len();
            mask.extend((0..w).map(|j| j < l));
            segments.push(start..start + w);
        }
        Layout { mask, segments }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for r in &self.segments {
            if r.start != next || r.end < r.start {
                return Err(Error::Contract("segments must tile the rows in order".into()));
            }
            next = r.end;
        }
        if next != self.mask.len() {
            return Err(Error::Contract("segments must cover every row".into()));
        }
        Ok(())
    }
}

/// Randomness and mode for one forward call.
#[derive(Debug, Clone)]
pub struct CallCtx {
    pub lsh: RngStream,
    pub dropout_key: u64,
    pub train: bool,
}

impl CallCtx {
    pub fn eval(lsh_seed: u64) -> Self {
        CallCtx {
            lsh: RngStream::new(lsh_seed, "lsh"),
            dropout_key: 0,
            train: false,
        }
    }

    pub fn child(&self, label: impl std::fmt::Display) -> CallCtx {
        let label = label.to_string();
        CallCtx {
            lsh: self.lsh.derive(&label),
            dropout_key: mix(self.dropout_key, crate::numerics::rng::fnv1a(label.as_bytes())),
            train: self.train,
        }
    }

    pub fn dropout(&self, cfg: &LayerConfig) -> f64 {
        if self.train {
            cfg.dropout
        } else {
            0.0
        }
    }
}
