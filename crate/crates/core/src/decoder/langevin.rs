use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor};
use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::lm::TransformerLm;

use super::rollout::{rollout, Relaxation};
use super::{BiasState, DecodeConfig, DecodeTrace, Generation, ScheduleKind, TraceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub length: usize,
    pub max_iterations: usize,
    /// Gradient step on the free logits.
    pub step_size: f64,
    /// Standard deviation of the injected noise at the first update.
    pub noise_scale: f64,
    /// Per-update geometric decay of the noise scale.
    pub noise_decay: f64,
    /// The initial logits are the greedy path's logits divided by this.
    pub init_temperature: f64,
    pub repetition_penalty: f64,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            length: 12,
            max_iterations: 400,
            step_size: 1.0,
            noise_scale: 0.1,
            noise_decay: 0.99,
            init_temperature: 1.0,
            repetition_penalty: 1.2,
            seed: 0,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if self.length == 0 {
            return Err(Error::Config("generation length must be at least 1".into()));
        }
        if !positive(self.step_size) || !positive(self.init_temperature) {
            return Err(Error::Config("step size and temperature must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) || !(0.0..=1.0).contains(&self.noise_decay) {
            return Err(Error::Config("noise scale must be >= 0 and decay in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `z <- z - step * grad + sigma * xi` with `xi` standard normal.
pub fn langevin_update(z: &mut [f64], grad: &[f64], step: f64, sigma: f64, rng: &mut ChaCha8Rng) {
    for (x, g) in z.iter_mut().zip(grad) {
        *x -= step * g;
        if sigma > 0.0 {
            let xi: f64 = StandardNormal.sample(rng);
            *x += sigma * xi;
        }
    }
}

/// Optimises a free `L x V` logit matrix with noisy gradient steps.
///
/// Each iteration relaxes the logits with a straight-through softmax (one-hot
/// forward, softmax Jacobian backward), evaluates `energy` on the result and
/// reads tokens off by per-position argmax. There is no autoregressive
/// conditioning during optimisation: the language model only enters through
/// the initial logits and the energy.
pub fn langevin_baseline_generate<E: Energy + ?Sized>(
    lm: &TransformerLm,
    energy: &E,
    prompt: &[usize],
    config: &LangevinConfig,
) -> Result<Generation> {
    config.validate()?;
    let v = lm.config().vocab_size;
    if energy.vocab_size() != v {
        return Err(Error::Config("energy and generator vocabularies differ".into()));
    }
    let l = config.length;
    let mut z = initial_logits(lm, prompt, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = config.step_size;
    let mut snapshot: Option<Tensor> = None;
    let mut sigma = config.noise_scale;
    let mut trace = DecodeTrace::default();

    for iteration in 0..=config.max_iterations {
        let start = Instant::now();
        let mut tape = Tape::new();
        let zv = tape.leaf(&z);
        let p = tape.softmax(zv);
        let values = tape.value(zv);
        let ids: Vec<usize> = (0..l).map(|r| argmax(&values[r * v..(r + 1) * v])).collect();
        let hard = tape.constant(&Tensor::one_hot_rows(&ids, v));
        let frozen = tape.detach(p);
        let delta = tape.sub(p, frozen)?;
        let relaxed = tape.add(hard, delta)?;
        let ev = energy.energy(&mut tape, prompt, relaxed)?;
        let total = tape.scalar(ev.total);
        if !total.is_finite() {
            trace.records.push(TraceRecord {
                iteration,
                ids,
                total,
                constraint: f64::NAN,
                fluency: f64::NAN,
                satisfied: false,
                finite: false,
                seconds: start.elapsed().as_secs_f64(),
            });
            trace.rollbacks += 1;
            match snapshot.take() {
                Some(prev) => {
                    z = prev;
                    step *= 0.5;
                    continue;
                }
                None => break,
            }
        }
        let satisfied = energy.satisfied(prompt, &ids)?;
        if !satisfied && iteration < config.max_iterations {
            let g = tape.backward(ev.total)?.wrt(zv, z.len());
            snapshot = Some(z.clone());
            langevin_update(z.data_mut(), &g, step, sigma, &mut rng);
            sigma *= config.noise_decay;
        }
        trace.records.push(TraceRecord {
            iteration,
            ids,
            total,
            constraint: tape.scalar(ev.constraint),
            fluency: tape.scalar(ev.fluency),
            satisfied,
            finite: true,
            seconds: start.elapsed().as_secs_f64(),
        });
        if satisfied {
            trace.stopped_early = true;
            break;
        }
    }
    trace.select_best();
    let ids = trace.best.map(|b| trace.records[b].ids.clone()).unwrap_or_default();
    Ok(Generation {
        text: lm.vocab().detokenize(&ids),
        ids,
        trace,
    })
}

/// Processed logits along the greedy path, scaled by `1 / init_temperature`.
fn initial_logits(lm: &TransformerLm, prompt: &[usize], config: &LangevinConfig) -> Result<Tensor> {
    let decode = DecodeConfig {
        length: config.length,
        repetition_penalty: config.repetition_penalty,
        schedule: ScheduleKind::Constant,
        ..DecodeConfig::default()
    };
    let bias = BiasState::zeros(config.length, lm.config().d_model, ScheduleKind::Constant);
    let mut tape = Tape::new();
    let ro = rollout(&mut tape, lm, &bias, prompt, &decode, Relaxation::StraightThrough)?;
    let mut data = Vec::with_capacity(config.length * lm.config().vocab_size);
    for &y in &ro.logits {
        data.extend(tape.value(y).iter().map(|x| x / config.init_temperature));
    }
    Tensor::new(vec![config.length, lm.config().vocab_size], data)
}
