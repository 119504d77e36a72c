use crate::autodiff::{argmax, grad_check, GradCheckReport, Tape, Var};
use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::lm::{check_length, prime, LogitPolicy, TransformerLm};

use super::{adjust_logits, adjust_logits_learned, weight_schedule, BiasState, DecodeConfig, FeedbackGradient};

/// How each step's adjusted logits become the vector fed to the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Exact one-hot forward, identity backward.
    StraightThrough,
    /// `softmax(y_t)`; smooth, used to check gradients end to end.
    Softmax,
}

/// Tape handles for one rollout.
pub struct Rollout {
    /// Fed-back vectors, `L x V`.
    pub one_hots: Var,
    /// `argmax` of each step's adjusted logits.
    pub ids: Vec<usize>,
    /// The bias parameters `L x d` as a leaf.
    pub h: Var,
    /// Learned schedule `1 x L`, when enabled.
    pub weights: Option<Var>,
    /// Per-step bias `1 x V`, i.e. rows of `h . W_head`.
    pub bias_logits: Vec<Var>,
    /// Per-step adjusted logits `1 x V`.
    pub logits: Vec<Var>,
}

/// Generates `bias.length()` tokens after `prompt` with the bias applied.
pub fn rollout(
    tape: &mut Tape,
    lm: &TransformerLm,
    bias: &BiasState,
    prompt: &[usize],
    config: &DecodeConfig,
    mode: Relaxation,
) -> Result<Rollout> {
    let h = tape.leaf(&bias.h);
    let weights = bias.weights.as_ref().map(|(w, _)| tape.leaf(w));
    rollout_vars(tape, lm, h, weights, prompt, config, mode)
}

/// [`rollout`] with the bias parameters already on the tape: `h` is `L x d`
/// and `weights`, if given, the `1 x L` schedule vector.
pub fn rollout_vars(
    tape: &mut Tape,
    lm: &TransformerLm,
    h: Var,
    weights: Option<Var>,
    prompt: &[usize],
    config: &DecodeConfig,
    mode: Relaxation,
) -> Result<Rollout> {
    let (l, d) = tape.dims(h);
    if d != lm.config().d_model {
        return Err(Error::Shape {
            op: "rollout",
            lhs: tape.shape(h).to_vec(),
            rhs: vec![l, lm.config().d_model],
        });
    }
    if let Some(w) = weights {
        if tape.dims(w) != (1, l) {
            return Err(Error::Shape {
                op: "rollout",
                lhs: tape.shape(w).to_vec(),
                rhs: vec![1, l],
            });
        }
    }
    check_length(lm, prompt.len(), l)?;
    let policy = LogitPolicy {
        repetition_penalty: config.repetition_penalty,
        ban_reserved: true,
    };
    policy.validate()?;

    let (mut session, mut lm_logits) = prime(lm, tape, prompt)?;
    let head = session.bound().head();
    let all_bias = tape.matmul(h, head)?;

    let mut history = prompt.to_vec();
    let mut rows = Vec::with_capacity(l);
    let mut ids = Vec::with_capacity(l);
    let mut bias_logits = Vec::with_capacity(l);
    let mut logits = Vec::with_capacity(l);
    for t in 0..l {
        let y_lm = policy.apply(tape, lm_logits, &history)?;
        let y_b = tape.slice_rows(all_bias, t, t + 1)?;
        let y = match weights {
            Some(w) => {
                let w_t = tape.slice_cols(w, t, t + 1)?;
                adjust_logits_learned(tape, y_lm, y_b, w_t)?
            }
            None => adjust_logits(tape, y_lm, y_b, weight_schedule(config.schedule, t, l)?)?,
        };
        if tape.value(y).iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("adjusted logits at step {t}")));
        }
        let tok = argmax(tape.value(y));
        let fed = match mode {
            Relaxation::StraightThrough => tape.ste_one_hot(y)?,
            Relaxation::Softmax => tape.softmax(y),
        };
        rows.push(fed);
        ids.push(tok);
        history.push(tok);
        bias_logits.push(y_b);
        logits.push(y);
        if t + 1 < l {
            let into_lm = match config.feedback {
                FeedbackGradient::Full => fed,
                FeedbackGradient::Direct => tape.detach(fed),
            };
            lm_logits = session.step(tape, into_lm)?;
        }
    }
    let one_hots = tape.concat_rows(&rows)?;
    Ok(Rollout {
        one_hots,
        ids,
        h,
        weights,
        bias_logits,
        logits,
    })
}

/// Compares the tape gradient of `energy` with respect to the bias parameters
/// against central differences. The rollout is relaxed with a softmax so the
/// energy is smooth in `h`; `h` is drawn as in [`BiasState::init`]. The
/// check always uses [`FeedbackGradient::Full`], since the direct surrogate
/// is not the derivative of the rollout.
pub fn bias_grad_check<E: Energy + ?Sized>(
    lm: &TransformerLm,
    energy: &E,
    prompt: &[usize],
    config: &DecodeConfig,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let config = &DecodeConfig {
        feedback: FeedbackGradient::Full,
        ..config.clone()
    };
    let h = BiasState::init(config.length, lm.config().d_model, config).h;
    grad_check(
        |t, h| {
            let ro = rollout_vars(t, lm, h, None, prompt, config, Relaxation::Softmax)?;
            Ok(energy.energy(t, prompt, ro.one_hots)?.total)
        },
        &h,
        step,
        tol,
    )
}
