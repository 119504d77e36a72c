//! Tiny autoregressive language model: vocabulary, transformer, training,
//! greedy decoding, repetition penalty and perplexity.

mod decode;
mod model;
mod train;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use decode::{
    apply_repetition_penalty, check_length, greedy_decode, perplexity, prime, repetition_factors, LogitPolicy,
    BANNED_LOGIT,
};
pub use model::{BoundLm, LmConfig, Session, TransformerLm};
pub use train::{split_indices, train_lm, TrainConfig, TrainReport};
pub use vocab::{Tokenized, Vocab, BOS, EOS, MAX_VOCAB, PAD, RESERVED, UNK};

use crate::checkpoint;
use crate::error::Result;

pub const CHECKPOINT_KIND: &str = "lm";

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    vocab: Vocab,
}

impl TransformerLm {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.param_names();
        let tensors: Vec<_> = names.into_iter().zip(self.params()).collect();
        let meta = LmMeta {
            config: self.config().clone(),
            vocab: self.vocab().clone(),
        };
        checkpoint::encode(CHECKPOINT_KIND, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode::<LmMeta>(bytes, CHECKPOINT_KIND)?;
        Self::from_parts(ck.meta.vocab, ck.meta.config, ck.tensors.into_iter().map(|(_, t)| t).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `exp(-mean(log_probs))`.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> f64 {
    (-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp()
}

#[cfg(test)]
mod tests;
