use std::time::Instant;

use crate::autodiff::Tape;
use crate::energy::{Energy, EnergyVars};
use crate::error::{Error, Result};
use crate::lm::TransformerLm;

use super::rollout::{rollout, Relaxation, Rollout};
use super::{BiasState, DecodeConfig, DecodeTrace, Generation, TraceRecord};

/// Tunes per-step logit biases to minimise `energy`, returning the
/// lowest-energy rollout.
///
/// The first rollout uses the freshly initialised biases; each later one
/// follows one optimiser update. The run stops early once a rollout meets the
/// energy's stop rule. A rollout with a non-finite energy is recorded but
/// discarded: the biases and optimiser are restored to their state before the
/// offending update and the learning rate is halved.
pub fn bolt_generate<E: Energy + ?Sized>(
    lm: &TransformerLm,
    energy: &E,
    prompt: &[usize],
    config: &DecodeConfig,
) -> Result<Generation> {
    bolt_generate_with(lm, energy, prompt, config, Relaxation::StraightThrough)
}

pub fn bolt_generate_with<E: Energy + ?Sized>(
    lm: &TransformerLm,
    energy: &E,
    prompt: &[usize],
    config: &DecodeConfig,
    mode: Relaxation,
) -> Result<Generation> {
    config.validate()?;
    if energy.vocab_size() != lm.config().vocab_size {
        return Err(Error::Config("energy and generator vocabularies differ".into()));
    }
    let mut bias = BiasState::init(config.length, lm.config().d_model, config);
    let mut lr = config.lr;
    let mut snapshot: Option<BiasState> = None;
    let mut trace = DecodeTrace::default();

    for iteration in 0..=config.max_iterations {
        let start = Instant::now();
        let mut tape = Tape::new();
        let evaluated = evaluate(&mut tape, lm, energy, &bias, prompt, config, mode);
        let (ro, ev) = match evaluated {
            Ok(Some(pair)) => pair,
            Ok(None) | Err(Error::NonFinite(_)) => {
                trace.records.push(TraceRecord {
                    iteration,
                    ids: Vec::new(),
                    total: f64::NAN,
                    constraint: f64::NAN,
                    fluency: f64::NAN,
                    satisfied: false,
                    finite: false,
                    seconds: start.elapsed().as_secs_f64(),
                });
                trace.rollbacks += 1;
                match snapshot.take() {
                    Some(prev) => {
                        bias = prev;
                        lr *= 0.5;
                        bias.set_lr(lr);
                        continue;
                    }
                    None => break,
                }
            }
            Err(e) => return Err(e),
        };
        let satisfied = energy.satisfied(prompt, &ro.ids)?;
        let last = satisfied || iteration == config.max_iterations;
        if !last {
            let grads = tape.backward(ev.total)?;
            snapshot = Some(bias.clone());
            let g = grads.wrt(ro.h, bias.h.len());
            bias.optim.update(bias.h.data_mut(), &g);
            if let (Some(wv), Some((w, opt))) = (ro.weights, bias.weights.as_mut()) {
                let g = grads.wrt(wv, w.len());
                opt.update(w.data_mut(), &g);
            }
            if !bias.is_finite() {
                // the next rollout would be garbage; undo right away
                bias = snapshot.take().expect("just stored");
                lr *= 0.5;
                bias.set_lr(lr);
                trace.rollbacks += 1;
            }
        }
        trace.records.push(TraceRecord {
            iteration,
            ids: ro.ids,
            total: tape.scalar(ev.total),
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

/// One rollout and its energy, or `None` when the energy is not finite.
fn evaluate<E: Energy + ?Sized>(
    tape: &mut Tape,
    lm: &TransformerLm,
    energy: &E,
    bias: &BiasState,
    prompt: &[usize],
    config: &DecodeConfig,
    mode: Relaxation,
) -> Result<Option<(Rollout, EnergyVars)>> {
    let ro = rollout(tape, lm, bias, prompt, config, mode)?;
    let ev = energy.energy(tape, prompt, ro.one_hots)?;
    Ok(tape.scalar(ev.total).is_finite().then_some((ro, ev)))
}
