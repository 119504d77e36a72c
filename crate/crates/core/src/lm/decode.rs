use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::model::TransformerLm;
use super::vocab::{BOS, RESERVED};
use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Added to logits of tokens that must never be emitted.
pub const BANNED_LOGIT: f64 = -1e9;

/// CTRL-style repetition penalty: every token already in `history` has a
/// positive logit divided by `penalty` and a negative one multiplied by it.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[usize], penalty: f64) -> Result<()> {
    let factors = repetition_factors(logits, history, penalty)?;
    logits.iter_mut().zip(factors).for_each(|(l, f)| *l *= f);
    Ok(())
}

/// Per-entry multipliers that realise [`apply_repetition_penalty`].
pub fn repetition_factors(logits: &[f64], history: &[usize], penalty: f64) -> Result<Vec<f64>> {
    if !(penalty >= 1.0) {
        return Err(Error::invalid(format!("repetition penalty must be >= 1, got {penalty}")));
    }
    let mut factors = vec![1.0; logits.len()];
    for &id in history.iter().collect::<BTreeSet<_>>() {
        let Some(&l) = logits.get(id) else {
            return Err(Error::TokenOutOfRange { id, size: logits.len() });
        };
        factors[id] = if l > 0.0 { 1.0 / penalty } else { penalty };
    }
    Ok(factors)
}

/// How raw LM logits are processed before a token is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitPolicy {
    pub repetition_penalty: f64,
    /// Reserved tokens (`<pad>`, `<bos>`, `<eos>`, `<unk>`) are never emitted.
    pub ban_reserved: bool,
}

impl Default for LogitPolicy {
    fn default() -> Self {
        LogitPolicy {
            repetition_penalty: 1.2,
            ban_reserved: true,
        }
    }
}

impl LogitPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::invalid(format!(
                "repetition penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }

    /// Applies the penalty and the reserved-token ban on the tape. The penalty
    /// is a constant elementwise factor, so gradients pass through scaled.
    pub fn apply(&self, tape: &mut Tape, logits: Var, history: &[usize]) -> Result<Var> {
        let factors = repetition_factors(tape.value(logits), history, self.repetition_penalty)?;
        let shape = tape.shape(logits).to_vec();
        let mut out = logits;
        if factors.iter().any(|&f| f != 1.0) {
            let f = tape.constant_raw(shape.clone(), factors)?;
            out = tape.mul(out, f)?;
        }
        if self.ban_reserved {
            let mut mask = vec![0.0; tape.value(logits).len()];
            mask[..RESERVED.len()].iter_mut().for_each(|m| *m = BANNED_LOGIT);
            let m = tape.constant_raw(shape, mask)?;
            out = tape.add(out, m)?;
        }
        Ok(out)
    }
}

/// Feeds `BOS` and the prompt through a fresh session, returning the session
/// and the logits for the first continuation position.
pub fn prime<'m>(
    lm: &'m TransformerLm,
    tape: &mut Tape,
    prompt: &[usize],
) -> Result<(super::model::Session<'m>, Var)> {
    lm.vocab().check_ids(prompt)?;
    let bound = lm.bind(tape, false);
    let mut session = lm.session(bound);
    let v = lm.config().vocab_size;
    let mut logits = None;
    for &id in std::iter::once(&BOS).chain(prompt) {
        let oh = tape.constant(&Tensor::one_hot(id, v));
        logits = Some(session.step(tape, oh)?);
    }
    Ok((session, logits.expect("BOS is always fed")))
}

pub fn check_length(lm: &TransformerLm, prompt_len: usize, length: usize) -> Result<()> {
    if length == 0 {
        return Err(Error::invalid("generation length must be at least 1"));
    }
    // BOS + prompt + every generated token except the last is fed to the model
    let needed = 1 + prompt_len + length - 1;
    if needed > lm.config().max_len {
        return Err(Error::SequenceTooLong {
            len: needed,
            max: lm.config().max_len,
        });
    }
    Ok(())
}

/// Exactly `length` tokens, each the argmax of the processed logits.
pub fn greedy_decode(lm: &TransformerLm, prompt: &[usize], length: usize, policy: &LogitPolicy) -> Result<Vec<usize>> {
    policy.validate()?;
    check_length(lm, prompt.len(), length)?;
    let mut tape = Tape::new();
    let (mut session, mut logits) = prime(lm, &mut tape, prompt)?;
    let mut history = prompt.to_vec();
    let mut out = Vec::with_capacity(length);
    for t in 0..length {
        let z = policy.apply(&mut tape, logits, &history)?;
        let tok = argmax(tape.value(z));
        out.push(tok);
        history.push(tok);
        if t + 1 < length {
            let oh = tape.constant(&Tensor::one_hot(tok, lm.config().vocab_size));
            logits = session.step(&mut tape, oh)?;
        }
    }
    Ok(out)
}

/// `exp` of the mean negative log-likelihood of `ids` under `judge`.
pub fn perplexity(judge: &TransformerLm, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("perplexity of an empty sequence"));
    }
    let lp = judge.token_log_probs(ids)?;
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    Ok(nll.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_one_is_identity() {
        let mut l = vec![2.4, -1.0, 0.3];
        apply_repetition_penalty(&mut l, &[0, 1, 2], 1.0).unwrap();
        assert_eq!(l, vec![2.4, -1.0, 0.3]);
    }

    #[test]
    fn positive_logits_are_divided() {
        let mut l = vec![2.4, 0.5];
        apply_repetition_penalty(&mut l, &[0], 1.2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert_eq!(l[1], 0.5);
    }

    #[test]
    fn negative_logits_are_multiplied() {
        let mut l = vec![-1.0, 0.5];
        apply_repetition_penalty(&mut l, &[0, 0, 0], 1.2).unwrap();
        assert!((l[0] + 1.2).abs() < 1e-12);
    }

    #[test]
    fn penalty_below_one_is_rejected() {
        let mut l = vec![1.0];
        assert!(apply_repetition_penalty(&mut l, &[0], 0.9).is_err());
        assert!(apply_repetition_penalty(&mut l, &[0], f64::NAN).is_err());
    }
}
