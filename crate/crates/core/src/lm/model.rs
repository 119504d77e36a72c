//! Tiny pre-norm decoder-only transformer.
//!
//! Tokens enter as one-hot rows multiplied into the embedding table, so any
//! upstream gradient on the one-hots (from a straight-through estimator) flows
//! through the whole network. The output head is a plain `d x V` matrix with no
//! additive bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS};
use crate::autodiff::{log_sum_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};

const MASKED: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl LmConfig {
    /// Default desk-scale shape for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_len < 2 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// parameter layout
const TOK: usize = 0;
const POS: usize = 1;
const FIRST_LAYER: usize = 2;
const PER_LAYER: usize = 16;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

#[derive(Clone, Debug)]
pub struct TransformerLm {
    config: LmConfig,
    vocab: Vocab,
    params: Vec<Tensor>,
}

/// Parameters of one model placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundLm {
    vars: Vec<Var>,
}

impl BoundLm {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// The output head `d x V`.
    pub fn head(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }

    fn layer(&self, l: usize, slot: usize) -> Var {
        self.vars[FIRST_LAYER + l * PER_LAYER + slot]
    }

    fn final_ln(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 3], self.vars[n - 2])
    }
}

pub(crate) struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl TransformerLm {
    /// Fresh model with normal(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(vocab: Vocab, config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab has {} tokens but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (config.vocab_size, config.d_model);
        let mut params = vec![
            Tensor::randn(&[v, d], INIT_STD, &mut rng),
            Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng),
        ];
        for _ in 0..config.n_layers {
            for (slot, _) in LAYER_NAMES.iter().enumerate() {
                let t = match slot {
                    LN1_G | LN2_G => Tensor::filled(&[1, d], 1.0),
                    LN1_B | LN2_B | BQ | BK | BV | BO | B2 => Tensor::zeros(&[1, d]),
                    B1 => Tensor::zeros(&[1, 4 * d]),
                    WQ | WK | WV | WO => Tensor::randn(&[d, d], INIT_STD, &mut rng),
                    W1 => Tensor::randn(&[d, 4 * d], INIT_STD, &mut rng),
                    W2 => Tensor::randn(&[4 * d, d], INIT_STD, &mut rng),
                    _ => unreachable!(),
                };
                params.push(t);
            }
        }
        params.push(Tensor::filled(&[1, d], 1.0));
        params.push(Tensor::zeros(&[1, d]));
        params.push(Tensor::randn(&[d, v], INIT_STD, &mut rng));
        Ok(TransformerLm { config, vocab, params })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_parts(vocab: Vocab, config: LmConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::init(vocab, config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, (want, got)) in template.param_names().iter().zip(template.params.iter().zip(&params)) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
            if !got.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(TransformerLm {
            config: template.config,
            vocab: template.vocab,
            params,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.config.n_layers {
            names.extend(LAYER_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        names.extend(["ln_f.gamma", "ln_f.beta", "head"].map(String::from));
        names
    }

    /// Output head matrix `d x V`.
    pub fn head(&self) -> &Tensor {
        &self.params[self.params.len() - 1]
    }

    /// Places the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLm {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
            .collect();
        BoundLm { vars }
    }

    /// Logits for every position of a one-hot sequence (`n x V -> n x V`),
    /// with a causal mask.
    pub fn forward_sequence(&self, tape: &mut Tape, bound: &BoundLm, one_hots: Var) -> Result<Var> {
        self.forward_inner(tape, bound, one_hots, None)
    }

    pub(crate) fn forward_inner(
        &self,
        tape: &mut Tape,
        bound: &BoundLm,
        one_hots: Var,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let (n, v) = tape.dims(one_hots);
        if v != self.config.vocab_size {
            return Err(Error::Shape {
                op: "forward_sequence",
                lhs: tape.shape(one_hots).to_vec(),
                rhs: vec![self.config.vocab_size],
            });
        }
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let emb = tape.embed(one_hots, bound.vars[TOK])?;
        let pos = tape.slice_rows(bound.vars[POS], 0, n)?;
        let mut x = tape.add(emb, pos)?;
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                mask[i * n + j] = MASKED;
            }
        }
        let mask = tape.constant_raw(vec![n, n], mask)?;
        for l in 0..self.config.n_layers {
            x = self.block(tape, bound, l, x, &mut dropout, |tape, q, k, v, this| {
                this.attend(tape, q, k, v, Some(mask))
            })?;
        }
        self.logits(tape, bound, x)
    }

    /// Next-position logits (`1 x V`) for a one-hot prefix.
    pub fn forward_logits(&self, tape: &mut Tape, bound: &BoundLm, prefix: Var) -> Result<Var> {
        let all = self.forward_sequence(tape, bound, prefix)?;
        let n = tape.dims(all).0;
        tape.slice_rows(all, n - 1, n)
    }

    fn block<F>(
        &self,
        tape: &mut Tape,
        b: &BoundLm,
        l: usize,
        x: Var,
        dropout: &mut Option<Dropout<'_>>,
        attention: F,
    ) -> Result<Var>
    where
        F: FnOnce(&mut Tape, Var, Var, Var, &Self) -> Result<Var>,
    {
        let h = tape.layer_norm(x, b.layer(l, LN1_G), b.layer(l, LN1_B))?;
        let q = affine(tape, h, b.layer(l, WQ), b.layer(l, BQ))?;
        let k = affine(tape, h, b.layer(l, WK), b.layer(l, BK))?;
        let v = affine(tape, h, b.layer(l, WV), b.layer(l, BV))?;
        let a = attention(tape, q, k, v, self)?;
        let a = affine(tape, a, b.layer(l, WO), b.layer(l, BO))?;
        let a = apply_dropout(tape, a, dropout)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, b.layer(l, LN2_G), b.layer(l, LN2_B))?;
        let h = affine(tape, h, b.layer(l, W1), b.layer(l, B1))?;
        let h = tape.gelu(h);
        let h = affine(tape, h, b.layer(l, W2), b.layer(l, B2))?;
        let h = apply_dropout(tape, h, dropout)?;
        tape.add(x, h)
    }

    /// Multi-head attention of queries `q` (`m x d`) over keys/values (`n x d`).
    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let s = tape.matmul_t(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let p = tape.softmax(s);
            heads.push(tape.matmul(p, vh)?);
        }
        tape.concat_cols(&heads)
    }

    fn logits(&self, tape: &mut Tape, b: &BoundLm, x: Var) -> Result<Var> {
        let (g, beta) = b.final_ln();
        let h = tape.layer_norm(x, g, beta)?;
        tape.matmul(h, b.head())
    }

    /// Incremental decoder that caches keys and values on the tape.
    pub fn session(&self, bound: BoundLm) -> Session<'_> {
        Session {
            lm: self,
            bound,
            keys: vec![None; self.config.n_layers],
            values: vec![None; self.config.n_layers],
            position: 0,
        }
    }

    /// Plain next-token logits for a token prefix (BOS is prepended).
    pub fn next_token_logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.vocab.check_ids(ids)?;
        let mut seq = Vec::with_capacity(ids.len() + 1);
        seq.push(BOS);
        seq.extend_from_slice(ids);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let oh = tape.constant(&Tensor::one_hot_rows(&seq, self.config.vocab_size));
        let logits = self.forward_logits(&mut tape, &bound, oh)?;
        Ok(tape.value(logits).to_vec())
    }

    /// `log p(ids[i] | BOS, ids[..i])` for every position.
    pub fn token_log_probs(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        self.vocab.check_ids(ids)?;
        let mut input = Vec::with_capacity(ids.len());
        input.push(BOS);
        input.extend_from_slice(&ids[..ids.len() - 1]);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let oh = tape.constant(&Tensor::one_hot_rows(&input, self.config.vocab_size));
        let logits = self.forward_sequence(&mut tape, &bound, oh)?;
        let v = self.config.vocab_size;
        let z = tape.value(logits);
        Ok(ids
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = &z[r * v..(r + 1) * v];
                row[t] - log_sum_exp(row)
            })
            .collect())
    }
}

/// Incremental forward pass; each [`Session::step`] consumes one one-hot row
/// and returns the logits for the following position.
pub struct Session<'m> {
    lm: &'m TransformerLm,
    bound: BoundLm,
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    position: usize,
}

impl Session<'_> {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn bound(&self) -> &BoundLm {
        &self.bound
    }

    pub fn step(&mut self, tape: &mut Tape, one_hot: Var) -> Result<Var> {
        let lm = self.lm;
        if tape.dims(one_hot) != (1, lm.config.vocab_size) {
            return Err(Error::Shape {
                op: "session_step",
                lhs: tape.shape(one_hot).to_vec(),
                rhs: vec![1, lm.config.vocab_size],
            });
        }
        if self.position >= lm.config.max_len {
            return Err(Error::SequenceTooLong {
                len: self.position + 1,
                max: lm.config.max_len,
            });
        }
        let p = self.position;
        let emb = tape.embed(one_hot, self.bound.vars[TOK])?;
        let pos = tape.slice_rows(self.bound.vars[POS], p, p + 1)?;
        let mut x = tape.add(emb, pos)?;
        for l in 0..lm.config.n_layers {
            let (keys, values) = (&mut self.keys[l], &mut self.values[l]);
            x = lm.block(tape, &self.bound, l, x, &mut None, |tape, q, k, v, this| {
                let k_all = match *keys {
                    Some(prev) => tape.concat_rows(&[prev, k])?,
                    None => k,
                };
                let v_all = match *values {
                    Some(prev) => tape.concat_rows(&[prev, v])?,
                    None => v,
                };
                *keys = Some(k_all);
                *values = Some(v_all);
                this.attend(tape, q, k_all, v_all, None)
            })?;
        }
        self.position += 1;
        lm.logits(tape, &self.bound, x)
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    use rand::Rng;
    let Some(d) = dropout else { return Ok(x) };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - d.rate);
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant_raw(tape.shape(x).to_vec(), mask)?;
    tape.mul(x, m)
}
