//! Bias-tuned autoregressive decoding and a Langevin-on-logits baseline.
//!
//! Each rollout re-runs the language model left to right. At step `t` the
//! model's (repetition-penalised) logits receive an additive bias
//! `w_t * (h_t . W_head)`, the result is turned into a one-hot vector by a
//! straight-through argmax, and that vector is fed back as the next input.
//! The whole rollout lives on one tape, so the energy of the finished
//! sequence can be differentiated with respect to the bias parameters `h`.

mod bolt;
mod langevin;
mod rollout;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use bolt::{bolt_generate, bolt_generate_with};
pub use langevin::{langevin_baseline_generate, langevin_update, LangevinConfig};
pub use rollout::{bias_grad_check, rollout, rollout_vars, Relaxation, Rollout};

pub const DEFAULT_LR: f64 = 0.025;
pub const DEFAULT_INIT_STD: f64 = 0.25;
pub const DEFAULT_MAX_ITERATIONS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `1 - t/L`
    #[default]
    Decreasing,
    /// `t/L`
    Increasing,
    /// `1`
    Constant,
    /// A tunable vector `w[t]`, initialised to 1 and optimised with the biases.
    Learned,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Increasing,
        ScheduleKind::Decreasing,
        ScheduleKind::Constant,
        ScheduleKind::Learned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Decreasing => "decreasing",
            ScheduleKind::Increasing => "increasing",
            ScheduleKind::Constant => "constant",
            ScheduleKind::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule kind {s:?}")))
    }
}

/// Paths the energy gradient takes back through a rollout.
///
/// Each fed-back vector reaches the energy twice: directly, as a row of the
/// scored sequence, and through the language model, as the input of the next
/// step. The second path compounds once per step. With a small model whose
/// vocabulary is much larger than its width it grows geometrically and
/// swamps the direct signal at early steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackGradient {
    /// Both paths: the exact gradient of the unrolled rollout.
    #[default]
    Full,
    /// The direct path only; the model's input is detached.
    Direct,
}

/// Bias weight at step `t` (0-based) of `l`. `t = l` is accepted so the
/// endpoint of the linear schedules can be queried. The learned kind reports
/// its initial value.
pub fn weight_schedule(kind: ScheduleKind, t: usize, l: usize) -> Result<f64> {
    if l == 0 || t > l {
        return Err(Error::invalid(format!("schedule step {t} outside 0..={l}")));
    }
    let frac = t as f64 / l as f64;
    Ok(match kind {
        ScheduleKind::Decreasing => 1.0 - frac,
        ScheduleKind::Increasing => frac,
        ScheduleKind::Constant | ScheduleKind::Learned => 1.0,
    })
}

/// `y_lm + w * y_b` on the tape, both `1 x V`.
pub fn adjust_logits(tape: &mut Tape, y_lm: Var, y_b: Var, w: f64) -> Result<Var> {
    if tape.shape(y_lm) != tape.shape(y_b) {
        return Err(Error::Shape {
            op: "adjust_logits",
            lhs: tape.shape(y_lm).to_vec(),
            rhs: tape.shape(y_b).to_vec(),
        });
    }
    let scaled = tape.scale(y_b, w);
    tape.add(y_lm, scaled)
}

/// As [`adjust_logits`] with the weight itself a `1 x 1` tape node.
pub fn adjust_logits_learned(tape: &mut Tape, y_lm: Var, y_b: Var, w: Var) -> Result<Var> {
    if tape.shape(y_lm) != tape.shape(y_b) {
        return Err(Error::Shape {
            op: "adjust_logits",
            lhs: tape.shape(y_lm).to_vec(),
            rhs: tape.shape(y_b).to_vec(),
        });
    }
    let scaled = tape.matmul(w, y_b)?;
    tape.add(y_lm, scaled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Number of tokens to generate.
    pub length: usize,
    /// Number of optimiser updates; the trace holds at most one more rollout.
    pub max_iterations: usize,
    pub lr: f64,
    pub init_std: f64,
    pub schedule: ScheduleKind,
    pub repetition_penalty: f64,
    #[serde(default)]
    pub feedback: FeedbackGradient,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            length: 12,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            lr: DEFAULT_LR,
            init_std: DEFAULT_INIT_STD,
            schedule: ScheduleKind::Decreasing,
            repetition_penalty: 1.2,
            feedback: FeedbackGradient::Full,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("generation length must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(Error::Config(format!("init std must be >= 0, got {}", self.init_std)));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config(format!(
                "repetition penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

/// Tunable state of one generation: the `L x d` bias parameters, their
/// optimiser, and the schedule vector when it is learned.
#[derive(Clone, Debug)]
pub struct BiasState {
    pub h: Tensor,
    pub optim: Adam,
    pub weights: Option<(Tensor, Adam)>,
}

impl BiasState {
    pub fn init(length: usize, d_model: usize, config: &DecodeConfig) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let h = Tensor::randn(&[length, d_model], config.init_std, &mut rng);
        let weights = (config.schedule == ScheduleKind::Learned)
            .then(|| (Tensor::filled(&[1, length], 1.0), Adam::new(length, config.lr)));
        BiasState {
            optim: Adam::new(h.len(), config.lr),
            h,
            weights,
        }
    }

    pub fn zeros(length: usize, d_model: usize, schedule: ScheduleKind) -> Self {
        let config = DecodeConfig {
            init_std: 0.0,
            schedule,
            ..DecodeConfig::default()
        };
        Self::init(length, d_model, &config)
    }

    pub fn length(&self) -> usize {
        self.h.rows()
    }

    fn set_lr(&mut self, lr: f64) {
        self.optim.lr = lr;
        if let Some((_, opt)) = &mut self.weights {
            opt.lr = lr;
        }
    }

    fn is_finite(&self) -> bool {
        self.h.is_finite() && self.weights.as_ref().is_none_or(|(w, _)| w.is_finite())
    }
}

/// One rollout of an optimisation run. Equality ignores the wall-clock time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub ids: Vec<usize>,
    pub total: f64,
    pub constraint: f64,
    pub fluency: f64,
    /// Early-stop predicate on this rollout's tokens.
    pub satisfied: bool,
    /// Non-finite records are kept for inspection but never selected.
    pub finite: bool,
    #[serde(skip)]
    pub seconds: f64,
}

impl PartialEq for TraceRecord {
    fn eq(&self, o: &Self) -> bool {
        let bits = |x: f64| x.to_bits();
        self.iteration == o.iteration
            && self.ids == o.ids
            && bits(self.total) == bits(o.total)
            && bits(self.constraint) == bits(o.constraint)
            && bits(self.fluency) == bits(o.fluency)
            && self.satisfied == o.satisfied
            && self.finite == o.finite
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub records: Vec<TraceRecord>,
    /// Index of the lowest-energy finite record.
    pub best: Option<usize>,
    pub stopped_early: bool,
    /// Learning-rate halvings triggered by non-finite energies.
    pub rollbacks: usize,
}

impl DecodeTrace {
    /// Index of the first rollout meeting the stop rule.
    pub fn iterations_to_success(&self) -> Option<usize> {
        self.records.iter().position(|r| r.satisfied && r.finite)
    }

    pub fn seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    pub(crate) fn select_best(&mut self) {
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if r.finite && best.is_none_or(|b| r.total < self.records[b].total) {
                best = Some(i);
            }
        }
        self.best = best;
    }
}

/// Outcome of a decoding run. `ids` is empty when no rollout had a finite energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub text: String,
    pub trace: DecodeTrace,
}

impl Generation {
    pub fn succeeded(&self) -> bool {
        self.trace.best.is_some()
    }

    /// Recorded energy of the returned sequence.
    pub fn energy(&self) -> Option<f64> {
        self.trace.best.map(|b| self.trace.records[b].total)
    }
}

#[cfg(test)]
mod tests;
