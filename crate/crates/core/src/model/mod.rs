//! Compact encoder-decoder Transformer over a shared vocabulary.

mod checkpoint;
pub mod ops;
mod params;
mod transformer;

use thiserror::Error;

use crate::corpus::special::{BOS, EOS, PAD};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{
    init_parameters, GradStore, Layout, ModelConfig, NamedTensor, ParameterStore, StageTag,
};
pub use transformer::{
    attention_maps, forward, gradients, loss, smoothed_xent, AttentionKind, AttentionMap, Decoder,
    EncodedSource, Logits, LossStats,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch has no non-PAD target position")]
    AllPadded,
    #[error("checkpoint I/O failure: {0}")]
    IoFailure(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ragged batch: {0}")]
    RaggedBatch(String),
}

/// PAD-padded source/target id matrices. Target rows are BOS-prefixed and
/// EOS-terminated.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<u32>>,
    pub target: Vec<Vec<u32>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
}

fn pad_to(rows: Vec<Vec<u32>>) -> Vec<Vec<u32>> {
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.into_iter()
        .map(|mut r| {
            r.resize(len, PAD);
            r
        })
        .collect()
}

fn masks(rows: &[Vec<u32>]) -> Vec<Vec<bool>> {
    rows.iter()
        .map(|r| r.iter().map(|&id| id != PAD).collect())
        .collect()
}

impl Batch {
    /// Builds a batch from `(source, target)` id pairs; targets are given
    /// without BOS/EOS. Sources longer than `max_src` and targets longer than
    /// `max_tgt` (before BOS/EOS) are truncated.
    pub fn from_pairs<S, T>(pairs: &[(S, T)], max_src: usize, max_tgt: usize) -> Self
    where
        S: AsRef<[u32]>,
        T: AsRef<[u32]>,
    {
        let source = pad_to(
            pairs
                .iter()
                .map(|(s, _)| s.as_ref().iter().take(max_src).copied().collect())
                .collect(),
        );
        let target = pad_to(
            pairs
                .iter()
                .map(|(_, t)| {
                    let mut row = Vec::with_capacity(t.as_ref().len() + 2);
                    row.push(BOS);
                    row.extend(t.as_ref().iter().take(max_tgt));
                    row.push(EOS);
                    row
                })
                .collect(),
        );
        Self::assemble(source, target)
    }

    /// Uses already padded rows as-is.
    pub fn from_padded(source: Vec<Vec<u32>>, target: Vec<Vec<u32>>) -> Result<Self, ModelError> {
        for (name, rows) in [("source", &source), ("target", &target)] {
            if let Some(first) = rows.first() {
                if rows.iter().any(|r| r.len() != first.len()) {
                    return Err(ModelError::RaggedBatch(format!("{name} rows differ in length")));
                }
            }
        }
        if source.len() != target.len() {
            return Err(ModelError::RaggedBatch(format!(
                "{} source rows vs {} target rows",
                source.len(),
                target.len()
            )));
        }
        Ok(Self::assemble(source, target))
    }

    fn assemble(source: Vec<Vec<u32>>, target: Vec<Vec<u32>>) -> Self {
        Batch {
            source_mask: masks(&source),
            target_mask: masks(&target),
            source,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn src_len(&self) -> usize {
        self.source.first().map_or(0, Vec::len)
    }

    pub fn tgt_len(&self) -> usize {
        self.target.first().map_or(0, Vec::len)
    }
}
