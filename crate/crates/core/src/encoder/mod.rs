//! Miniature post-LN transformer encoder with control-code conditioning and
//! per-format adapter variants.
//!
//! The embedding of an input is the final-layer hidden state at position 0.
//! Depending on the [`Variant`], position 0 holds `[CLS]` or a control code,
//! and each layer may route through the format's adapter, PAL branch or
//! adapter fusion.

mod checkpoint;
mod model;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ReferenceEmbedding, CHECKPOINT_VERSION};
pub use model::{EncoderModel, Param, ParamGroup};
pub use vocab::{code_token, tokenize, Lead, TokenSeq, Vocab, CLS, PAD, RESERVED, SEP, UNK};

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

/// Which format-specialization mechanism the encoder carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// One `[CLS]` embedding shared by every format.
    ClsOnly,
    /// A learned control-code embedding replaces `[CLS]` per format.
    Ctrl,
    /// Bottleneck adapter after each layer's feed-forward block, one stack per format.
    Adapter,
    /// Low-rank attention branch in parallel with each layer, one per format.
    Pals,
    /// Per-format attention over the four (frozen) format adapters' outputs.
    Fusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::ClsOnly, Variant::Ctrl, Variant::Adapter, Variant::Pals, Variant::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ClsOnly => "CLS_ONLY",
            Variant::Ctrl => "CTRL",
            Variant::Adapter => "ADAPTER",
            Variant::Pals => "PALS",
            Variant::Fusion => "FUSION",
        }
    }

    /// Whether embeddings are routed through per-format modules (rather than a lead token).
    pub fn routes_by_format(self) -> bool {
        matches!(self, Variant::Adapter | Variant::Pals | Variant::Fusion)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.as_str().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hashed word buckets (reserved ids come on top).
    pub vocab_size: usize,
    pub hash_seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    /// Projection width of each PAL branch.
    pub pal_rank: usize,
    pub init_std: f64,
    pub variant: Variant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            hash_seed: 0x5eed,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: 128,
            bottleneck: 16,
            pal_rank: 16,
            init_std: 0.02,
            variant: Variant::Ctrl,
        }
    }
}

impl EncoderConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size, self.hash_seed)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.hidden < 2 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} must be ≥ 2 and divisible by heads {}", self.hidden, self.heads));
        }
        if self.layers == 0 || self.ffn == 0 || self.bottleneck == 0 || self.pal_rank == 0 {
            return bad("layers, ffn, bottleneck and pal_rank must be positive".into());
        }
        if self.max_len < 4 {
            return bad(format!("max_len {} must be at least 4", self.max_len));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("document `{0}` has an empty title")]
    EmptyTitle(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("invalid model state: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
