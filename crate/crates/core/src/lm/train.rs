use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Dropout, LmConfig, TransformerLm};
use super::vocab::{Vocab, BOS, EOS};
use crate::autodiff::{Adam, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of lines held out for evaluation.
    pub holdout: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            holdout: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    /// Epoch at which the loss went non-finite; parameters are those of the
    /// last completed epoch.
    pub diverged_at: Option<usize>,
    pub unknown_tokens: usize,
}

impl TrainReport {
    pub fn heldout_ppl_before(&self) -> f64 {
        self.heldout_loss_before.exp()
    }

    pub fn heldout_ppl_after(&self) -> f64 {
        self.heldout_loss_after.exp()
    }
}

/// Splits `n` items into (train, heldout) index lists with a seeded shuffle.
/// With too few items to hold any out, both lists cover everything.
pub fn split_indices(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * holdout).floor() as usize;
    if k == 0 || k >= n {
        return (idx.clone(), idx);
    }
    let held = idx.split_off(n - k);
    (idx, held)
}

/// Token sequence for one corpus line: `BOS w1 .. wn EOS`, truncated to fit.
fn encode_line(vocab: &Vocab, line: &str, max_len: usize, unknown: &mut usize) -> Vec<usize> {
    let t = vocab.tokenize(line);
    *unknown += t.unknown;
    let mut ids = Vec::with_capacity(t.ids.len() + 2);
    ids.push(BOS);
    ids.extend(t.ids);
    ids.push(EOS);
    ids.truncate(max_len + 1);
    ids
}

/// Mean per-token cross-entropy of `lines` (already encoded).
pub(crate) fn mean_loss(lm: &TransformerLm, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        let lp = lm.token_log_probs(&s[1..])?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains a fresh model on `corpus`, one sample per line.
pub fn train_lm(corpus: &[String], vocab: Vocab, config: LmConfig, train: &TrainConfig) -> Result<(TransformerLm, TrainReport)> {
    let lines: Vec<&String> = corpus.iter().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let mut lm = TransformerLm::init(vocab, config, train.seed)?;
    let mut report = TrainReport::default();
    let max_len = lm.config().max_len;
    let seqs: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| encode_line(lm.vocab(), l, max_len, &mut report.unknown_tokens))
        .collect();
    let (train_idx, held_idx) = split_indices(seqs.len(), train.holdout, train.seed);
    let held: Vec<Vec<usize>> = held_idx.iter().map(|&i| seqs[i].clone()).collect();
    report.heldout_loss_before = mean_loss(&lm, &held)?;
    report.heldout_loss_after = report.heldout_loss_before;

    let mut optims: Vec<Adam> = lm.params().iter().map(|p| Adam::new(p.len(), train.lr)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let batch = train.batch_size.max(1);
    let v = lm.config().vocab_size;
    let dropout = lm.config().dropout;

    for epoch in 0..train.epochs {
        let snapshot = lm.params().to_vec();
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        let mut diverged = false;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = lm.bind(&mut tape, true);
            let tokens: usize = chunk.iter().map(|&i| seqs[i].len() - 1).sum();
            let mut total = None;
            for &i in chunk {
                let s = &seqs[i];
                let n = s.len() - 1;
                let oh = tape.constant(&Tensor::one_hot_rows(&s[..n], v));
                let logits = lm.forward_inner(
                    &mut tape,
                    &bound,
                    oh,
                    Some(Dropout {
                        rate: dropout,
                        rng: &mut rng,
                    }),
                )?;
                let ce = tape.cross_entropy(logits, &s[1..])?;
                let weighted = tape.scale(ce, n as f64 / tokens as f64);
                total = Some(match total {
                    Some(acc) => tape.add(acc, weighted)?,
                    None => weighted,
                });
            }
            let loss = total.expect("non-empty batch");
            let value = tape.scalar(loss);
            if !value.is_finite() {
                diverged = true;
                break;
            }
            epoch_loss += value * tokens as f64;
            epoch_tokens += tokens;
            let grads = tape.backward(loss)?;
            let mut gs: Vec<Vec<f64>> = bound
                .vars()
                .iter()
                .zip(lm.params())
                .map(|(&var, p)| grads.wrt(var, p.len()))
                .collect();
            if train.clip_norm > 0.0 {
                let norm = gs.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > train.clip_norm {
                    let s = train.clip_norm / norm;
                    gs.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            for ((p, g), opt) in lm.params_mut().iter_mut().zip(&gs).zip(&mut optims) {
                opt.update(p.data_mut(), g);
            }
        }
        if diverged || lm.params().iter().any(|p| !p.is_finite()) {
            lm.params_mut().clone_from_slice(&snapshot);
            report.diverged_at = Some(epoch);
            break;
        }
        report.epoch_loss.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    report.heldout_loss_after = mean_loss(&lm, &held)?;
    Ok((lm, report))
}
