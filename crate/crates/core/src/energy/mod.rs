//! Constraint energies over a (straight-through or relaxed) one-hot sequence
//! and the weighted objective the decoders minimise.
//!
//! All energies take the generated rows `L x V` as a tape node; the prompt is
//! supplied as token ids and enters as constant one-hots.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::discriminator::{AttributeClassifier, BoundClassifier};
use crate::error::{Error, Result};
use crate::lm::{BoundLm, TransformerLm, BOS};

/// Weight of the fluency term when none is given.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// `-p(class | prompt + continuation)` under the guiding classifier.
    Soft { class: String },
    /// `-diff_bleu(continuation, keywords)`.
    Hard { keywords: Vec<String> },
}

/// When a decoder may stop before its iteration budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    Never,
    /// Classifier probability of `class` on the full sequence drops below `threshold`.
    AttributeBelow { class: String, threshold: f64 },
    /// Classifier probability of `class` on the full sequence exceeds `threshold`.
    AttributeAbove { class: String, threshold: f64 },
    AnyKeyword,
    AllKeywords,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluencyForm {
    /// `-sum_t p(y_t | y_<t)`.
    #[default]
    Probability,
    /// `-sum_t log p(y_t | y_<t)`. Not part of the original formulation.
    LogProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec {
    pub constraint: Constraint,
    /// Weight of the fluency energy.
    pub lambda: f64,
    pub stop: StopRule,
    #[serde(default)]
    pub fluency: FluencyForm,
}

impl EnergySpec {
    /// Steer towards `class`; run the full budget unless a rule is added.
    pub fn soft(class: &str) -> Self {
        EnergySpec {
            constraint: Constraint::Soft { class: class.into() },
            lambda: DEFAULT_LAMBDA,
            stop: StopRule::Never,
            fluency: FluencyForm::Probability,
        }
    }

    /// Steer towards `target` and stop once `avoid` has probability below 0.01.
    pub fn avoid(target: &str, avoid: &str) -> Self {
        EnergySpec {
            stop: StopRule::AttributeBelow {
                class: avoid.into(),
                threshold: 0.01,
            },
            ..Self::soft(target)
        }
    }

    /// Topic control: stop as soon as any keyword appears.
    pub fn keywords_any(keywords: &[&str]) -> Self {
        EnergySpec {
            constraint: Constraint::Hard {
                keywords: keywords.iter().map(|s| s.to_string()).collect(),
            },
            lambda: DEFAULT_LAMBDA,
            stop: StopRule::AnyKeyword,
            fluency: FluencyForm::Probability,
        }
    }

    /// Lexical constraints: stop once every keyword appears.
    pub fn keywords_all(keywords: &[&str]) -> Self {
        EnergySpec {
            stop: StopRule::AllKeywords,
            ..Self::keywords_any(keywords)
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn keywords(&self) -> &[String] {
        match &self.constraint {
            Constraint::Hard { keywords } => keywords,
            Constraint::Soft { .. } => &[],
        }
    }
}

/// Models an objective is evaluated with. The classifier is needed by soft
/// constraints and attribute stop rules.
#[derive(Clone, Copy)]
pub struct EnergyModels<'a> {
    pub judge: &'a TransformerLm,
    pub classifier: Option<&'a AttributeClassifier>,
}

/// Tape nodes of one energy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EnergyVars {
    pub total: Var,
    pub constraint: Var,
    pub fluency: Var,
}

/// Scalar objective over a generated one-hot sequence.
pub trait Energy: Sync {
    fn vocab_size(&self) -> usize;

    fn energy(&self, tape: &mut Tape, prompt: &[usize], generated: Var) -> Result<EnergyVars>;

    /// Whether the realised continuation meets the stop rule.
    fn satisfied(&self, prompt: &[usize], generated: &[usize]) -> Result<bool>;
}

/// An [`EnergySpec`] resolved against concrete models.
pub struct Objective<'a> {
    spec: EnergySpec,
    models: EnergyModels<'a>,
    keyword_ids: Vec<usize>,
}

impl<'a> Objective<'a> {
    pub fn new(spec: &EnergySpec, models: EnergyModels<'a>) -> Result<Self> {
        if !(spec.lambda >= 0.0) || !spec.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", spec.lambda)));
        }
        let vocab = models.judge.vocab();
        let needs_clf = matches!(spec.constraint, Constraint::Soft { .. })
            || matches!(spec.stop, StopRule::AttributeAbove { .. } | StopRule::AttributeBelow { .. });
        if needs_clf {
            let clf = models
                .classifier
                .ok_or_else(|| Error::Config("attribute energy or stop rule needs a classifier".into()))?;
            if clf.vocab() != vocab {
                return Err(Error::Config("classifier vocabulary differs from the judge's".into()));
            }
        }
        if let Constraint::Soft { class } = &spec.constraint {
            models.classifier.expect("checked above").class_index(class)?;
        }
        if let StopRule::AttributeAbove { class, threshold } | StopRule::AttributeBelow { class, threshold } = &spec.stop
        {
            models.classifier.expect("checked above").class_index(class)?;
            if !(0.0..=1.0).contains(threshold) {
                return Err(Error::Config(format!("stop threshold {threshold} outside [0, 1]")));
            }
        }
        let keyword_ids = match &spec.constraint {
            Constraint::Hard { keywords } => {
                if keywords.is_empty() {
                    return Err(Error::Config("hard constraint needs at least one keyword".into()));
                }
                keywords
                    .iter()
                    .map(|k| match vocab.id(k) {
                        Some(id) if !vocab.is_reserved(id) => Ok(id),
                        _ => Err(Error::Config(format!("keyword {k:?} is not in the vocabulary"))),
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Constraint::Soft { .. } => {
                if matches!(spec.stop, StopRule::AnyKeyword | StopRule::AllKeywords) {
                    return Err(Error::Config("keyword stop rule on a soft constraint".into()));
                }
                Vec::new()
            }
        };
        Ok(Objective {
            spec: spec.clone(),
            models,
            keyword_ids,
        })
    }

    pub fn spec(&self) -> &EnergySpec {
        &self.spec
    }

    pub fn keyword_ids(&self) -> &[usize] {
        &self.keyword_ids
    }

    fn full_sequence(&self, tape: &mut Tape, prompt: &[usize], generated: Var) -> Result<Var> {
        if prompt.is_empty() {
            return Ok(generated);
        }
        let v = self.vocab_size();
        let p = tape.constant(&Tensor::one_hot_rows(prompt, v));
        tape.concat_rows(&[p, generated])
    }

    fn classifier_prob(&self, class: &str, ids: &[usize]) -> Result<f64> {
        let clf = self.models.classifier.expect("validated in new");
        Ok(clf.predict_ids(ids)?[clf.class_index(class)?])
    }
}

impl Energy for Objective<'_> {
    fn vocab_size(&self) -> usize {
        self.models.judge.config().vocab_size
    }

    fn energy(&self, tape: &mut Tape, prompt: &[usize], generated: Var) -> Result<EnergyVars> {
        let constraint = match &self.spec.constraint {
            Constraint::Soft { class } => {
                let clf = self.models.classifier.expect("validated in new");
                let b = clf.bind(tape, false);
                let seq = self.full_sequence(tape, prompt, generated)?;
                e_soft(tape, clf, &b, seq, class)?
            }
            Constraint::Hard { .. } => e_hard(tape, generated, &self.keyword_ids)?,
        };
        let judge = self.models.judge;
        let b = judge.bind(tape, false);
        let fluency = e_fluent(tape, judge, &b, prompt, generated, self.spec.fluency)?;
        let weighted = tape.scale(fluency, self.spec.lambda);
        let total = tape.add(constraint, weighted)?;
        Ok(EnergyVars {
            total,
            constraint,
            fluency,
        })
    }

    fn satisfied(&self, prompt: &[usize], generated: &[usize]) -> Result<bool> {
        let full = || prompt.iter().chain(generated).copied().collect::<Vec<_>>();
        Ok(match &self.spec.stop {
            StopRule::Never => false,
            StopRule::AttributeBelow { class, threshold } => self.classifier_prob(class, &full())? < *threshold,
            StopRule::AttributeAbove { class, threshold } => self.classifier_prob(class, &full())? > *threshold,
            StopRule::AnyKeyword => self.keyword_ids.iter().any(|k| generated.contains(k)),
            StopRule::AllKeywords => self.keyword_ids.iter().all(|k| generated.contains(k)),
        })
    }
}

/// `-p(class | sequence)`; `sequence` holds the prompt and continuation rows.
pub fn e_soft(
    tape: &mut Tape,
    clf: &AttributeClassifier,
    bound: &BoundClassifier,
    sequence: Var,
    class: &str,
) -> Result<Var> {
    let p = clf.p_attribute(tape, bound, sequence, class)?;
    Ok(tape.scale(p, -1.0))
}

/// Clipped unigram keyword coverage: `(1/K) sum_k min(1, sum_t y_t[w_k])`.
pub fn diff_bleu(tape: &mut Tape, generated: Var, keyword_ids: &[usize]) -> Result<Var> {
    let (l, v) = tape.dims(generated);
    if keyword_ids.is_empty() {
        return Err(Error::invalid("diff_bleu needs at least one keyword"));
    }
    if l == 0 {
        return Err(Error::invalid("diff_bleu of an empty sequence"));
    }
    let k = keyword_ids.len();
    let mut select = vec![0.0; v * k];
    for (j, &w) in keyword_ids.iter().enumerate() {
        if w >= v {
            return Err(Error::TokenOutOfRange { id: w, size: v });
        }
        select[w * k + j] = 1.0;
    }
    let select = tape.constant_raw(vec![v, k], select)?;
    let mass = tape.matmul(generated, select)?;
    let per_keyword = tape.sum_cols(mass);
    let clipped = tape.clamp_max(per_keyword, 1.0);
    let total = tape.sum(clipped);
    Ok(tape.scale(total, 1.0 / k as f64))
}

pub fn e_hard(tape: &mut Tape, generated: Var, keyword_ids: &[usize]) -> Result<Var> {
    let b = diff_bleu(tape, generated, keyword_ids)?;
    Ok(tape.scale(b, -1.0))
}

/// `-sum_t <p_judge(. | BOS, prompt, y_<t), y_t>` over generated positions.
pub fn e_fluent(
    tape: &mut Tape,
    judge: &TransformerLm,
    bound: &BoundLm,
    prompt: &[usize],
    generated: Var,
    form: FluencyForm,
) -> Result<Var> {
    let (l, v) = tape.dims(generated);
    if l == 0 {
        return Err(Error::invalid("fluency energy of an empty sequence"));
    }
    let mut head: Vec<usize> = Vec::with_capacity(prompt.len() + 1);
    head.push(BOS);
    head.extend_from_slice(prompt);
    judge.vocab().check_ids(&head)?;
    let head_rows = tape.constant(&Tensor::one_hot_rows(&head, v));
    let input = if l > 1 {
        let fed = tape.slice_rows(generated, 0, l - 1)?;
        tape.concat_rows(&[head_rows, fed])?
    } else {
        head_rows
    };
    let logits = judge.forward_sequence(tape, bound, input)?;
    let p0 = head.len() - 1;
    let next = tape.slice_rows(logits, p0, p0 + l)?;
    let scores = match form {
        FluencyForm::Probability => tape.softmax(next),
        FluencyForm::LogProbability => tape.log_softmax(next),
    };
    let picked = tape.mul(scores, generated)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// `constraint + lambda * fluency` for a spec evaluated on `generated`.
pub fn total_energy(objective: &Objective<'_>, tape: &mut Tape, prompt: &[usize], generated: Var) -> Result<Var> {
    Ok(objective.energy(tape, prompt, generated)?.total)
}

#[cfg(test)]
mod tests;
