//! Seeded benchmark runner: plans samples, decodes them in parallel, scores
//! every generation and aggregates the scores into a report.
//!
//! Output files in the run directory:
//! - `samples.jsonl`: one [`SampleRecord`] per line, in plan order.
//! - `timings.jsonl`: one [`SampleTiming`] per line.
//! - `report.json`: the [`GenerationReport`].
//!
//! Everything except the timings file and the report's `speed` section is a
//! pure function of the configuration, the models and the master seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{bolt_generate, langevin_baseline_generate, DecodeConfig, Generation, LangevinConfig};
use crate::energy::{Constraint, Energy, EnergyModels, EnergySpec, Objective, StopRule};
use crate::error::{Error, Result};
use crate::lm::{greedy_decode, perplexity, LogitPolicy};

use super::config::{Method, ModelSet, RunConfig, TaskKind, FORMAT_VERSION};
use super::metrics::{
    attribute_metrics_from_scores, attribute_score, dist_n, keyword_coverage, median, rep_ngram, tokens_per_second,
    AttributeMetrics, AttributeScore, RepNgram,
};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

/// One planned generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSample {
    pub index: usize,
    pub spec_index: usize,
    pub length: usize,
    pub prompt_index: usize,
    /// Position within the prompt's generation set.
    pub generation: usize,
    pub seed: u64,
}

/// Seed of sample `index`: the first word of the master seed's ChaCha stream
/// number `index`.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Samples ordered by spec, then length, then prompt, then generation.
pub fn plan(config: &RunConfig) -> Result<Vec<PlannedSample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.planned_samples());
    for spec_index in 0..config.specs.len() {
        for &length in &config.lengths {
            for prompt_index in 0..config.prompts.len() {
                for generation in 0..config.generations_per_prompt {
                    let index = out.len();
                    out.push(PlannedSample {
                        index,
                        spec_index,
                        length,
                        prompt_index,
                        generation,
                        seed: sample_seed(config.seed, index),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Scores of one finished generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub ids: Vec<usize>,
    pub text: String,
    /// Energy of the returned sequence; absent for greedy decoding.
    pub energy: Option<f64>,
    /// Total energy of every rollout, `null` where it was not finite.
    pub trace_energies: Vec<Option<f64>>,
    /// Optimiser update budget.
    pub budget: usize,
    pub iterations_to_success: Option<usize>,
    pub stopped_early: bool,
    pub rollbacks: usize,
    /// The spec's stop predicate holds on the returned sequence.
    pub satisfied: bool,
    /// Measured attribute under the guiding classifier.
    pub internal: Option<AttributeScore>,
    /// Measured attribute under the held-out classifier.
    pub external: Option<AttributeScore>,
    /// Judge perplexity of prompt plus continuation.
    pub ppl: f64,
    pub rep3: RepNgram,
    pub keyword_coverage: Option<f64>,
    pub keyword_hit: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok(Box<SampleResult>),
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub version: u32,
    #[serde(flatten)]
    pub plan: PlannedSample,
    pub prompt: String,
    pub outcome: Outcome,
}

impl SampleRecord {
    pub fn result(&self) -> Option<&SampleResult> {
        match &self.outcome {
            Outcome::Ok(r) => Some(r),
            Outcome::Failed { .. } => None,
        }
    }
}

/// Wall-clock of one sample's decode phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTiming {
    pub index: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub succeeded: bool,
}

/// Metrics over a set of sample records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub failed: usize,
    pub internal: Option<AttributeMetrics>,
    pub external: Option<AttributeMetrics>,
    pub ppl: Option<f64>,
    /// Mean Dist-3 over generation sets sharing prompt, spec and length.
    pub dist3: Option<f64>,
    /// Generations too short for a trigram.
    pub dist3_excluded: usize,
    pub rep3: Option<f64>,
    /// Fraction of generations holding at least one keyword.
    pub success: Option<f64>,
    pub coverage: Option<f64>,
    /// Fraction meeting the spec's stop predicate.
    pub satisfied: Option<f64>,
    /// Mean optimiser updates actually run.
    pub mean_iterations: Option<f64>,
    /// Sorted iterations-to-success of the samples that succeeded.
    pub iterations_to_success: Vec<usize>,
    /// Median iterations-to-success, counting a failure as budget + 1.
    pub median_iterations_to_success: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Aggregates {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let ok: Vec<(&SampleRecord, &SampleResult)> =
            records.iter().filter_map(|r| r.result().map(|x| (r, x))).collect();
        let mut groups: BTreeMap<(usize, usize, usize), Vec<&SampleResult>> = BTreeMap::new();
        for (r, x) in &ok {
            groups
                .entry((r.plan.spec_index, r.plan.length, r.plan.prompt_index))
                .or_default()
                .push(x);
        }
        let attribute = |pick: fn(&SampleResult) -> Option<AttributeScore>| {
            let sets: Vec<Vec<AttributeScore>> = groups
                .values()
                .map(|g| g.iter().filter_map(|x| pick(x)).collect())
                .collect();
            sets.iter().any(|s| !s.is_empty()).then(|| attribute_metrics_from_scores(&sets))
        };
        let mut dist3_excluded = 0;
        let dist3 = mean(groups.values().filter_map(|g| {
            let ids: Vec<Vec<usize>> = g.iter().map(|x| x.ids.clone()).collect();
            match dist_n(&ids, 3) {
                Ok(d) => {
                    dist3_excluded += d.excluded;
                    Some(d.value)
                }
                Err(_) => {
                    dist3_excluded += ids.len();
                    None
                }
            }
        }));
        let results = || ok.iter().map(|(_, x)| *x);
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut its: Vec<usize> = results().filter_map(|x| x.iterations_to_success).collect();
        its.sort_unstable();
        let optimised: Vec<&SampleResult> = results().filter(|x| !x.trace_energies.is_empty()).collect();
        let censored: Vec<f64> = optimised
            .iter()
            .map(|x| x.iterations_to_success.unwrap_or(x.budget + 1) as f64)
            .collect();
        Aggregates {
            samples: records.len(),
            failed: records.len() - ok.len(),
            internal: attribute(|x| x.internal),
            external: attribute(|x| x.external),
            ppl: mean(results().map(|x| x.ppl)),
            dist3,
            dist3_excluded,
            rep3: mean(results().map(|x| x.rep3.count as f64)),
            success: mean(results().filter_map(|x| x.keyword_hit.map(flag))),
            coverage: mean(results().filter_map(|x| x.keyword_coverage)),
            satisfied: mean(results().map(|x| flag(x.satisfied))),
            mean_iterations: mean(optimised.iter().map(|x| x.trace_energies.len().saturating_sub(1) as f64)),
            iterations_to_success: its,
            median_iterations_to_success: median(&censored),
        }
    }
}

/// Wall-clock summary; the only part of a report that varies between runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Speed {
    pub decode_seconds: f64,
    pub tokens_per_second: Option<f64>,
    /// Mean decode time of the samples meeting their stop predicate.
    pub seconds_per_success: Option<f64>,
}

impl Speed {
    pub fn from_timings(timings: &[SampleTiming]) -> Self {
        let pairs: Vec<(usize, f64)> = timings.iter().map(|t| (t.tokens, t.seconds)).collect();
        Speed {
            decode_seconds: pairs.iter().map(|p| p.1).sum(),
            tokens_per_second: tokens_per_second(&pairs).ok(),
            seconds_per_success: mean(timings.iter().filter(|t| t.succeeded).map(|t| t.seconds)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAggregates {
    pub spec_index: usize,
    pub spec: EnergySpec,
    pub metrics: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub version: u32,
    pub task: TaskKind,
    pub method: String,
    pub planned: usize,
    pub overall: Aggregates,
    pub per_spec: Vec<SpecAggregates>,
    pub speed: Speed,
}

impl GenerationReport {
    pub fn from_records(config: &RunConfig, records: &[SampleRecord], timings: &[SampleTiming]) -> Self {
        let per_spec = config
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let subset: Vec<SampleRecord> = records.iter().filter(|r| r.plan.spec_index == i).cloned().collect();
                SpecAggregates {
                    spec_index: i,
                    spec: spec.clone(),
                    metrics: Aggregates::from_records(&subset),
                }
            })
            .collect();
        GenerationReport {
            version: FORMAT_VERSION,
            task: config.task,
            method: config.method.name().into(),
            planned: config.planned_samples(),
            overall: Aggregates::from_records(records),
            per_spec,
            speed: Speed::from_timings(timings),
        }
    }

    /// Recomputes every aggregate from `records` and compares.
    pub fn check_consistency(&self, config: &RunConfig, records: &[SampleRecord]) -> Result<()> {
        let again = GenerationReport::from_records(config, records, &[]);
        if again.overall != self.overall || again.per_spec != self.per_spec || again.planned != self.planned {
            return Err(Error::invalid("report aggregates do not match the sample records"));
        }
        Ok(())
    }
}

/// Output of one benchmark run.
#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub config: RunConfig,
    pub records: Vec<SampleRecord>,
    pub timings: Vec<SampleTiming>,
    pub report: GenerationReport,
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a line-delimited record file.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

impl BenchmarkRun {
    /// The sample records as written to `samples.jsonl`.
    pub fn samples_jsonl(&self) -> Result<String> {
        jsonl(&self.records)
    }

    /// Writes the config, records, timings and report into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        std::fs::write(dir.join(SAMPLES_FILE), self.samples_jsonl()?)?;
        std::fs::write(dir.join(TIMINGS_FILE), jsonl(&self.timings)?)?;
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&self.report)?)?;
        Ok(())
    }
}

/// Which class an attribute metric measures for `spec`: the avoided class
/// for avoidance specs, otherwise the target class.
pub fn measured_class(spec: &EnergySpec) -> Option<&str> {
    match (&spec.stop, &spec.constraint) {
        (StopRule::AttributeBelow { class, .. }, _) => Some(class),
        (_, Constraint::Soft { class }) => Some(class),
        _ => None,
    }
}

fn decode(
    method: &Method,
    models: ModelSet<'_>,
    objective: &Objective<'_>,
    prompt: &[usize],
    sample: &PlannedSample,
) -> Result<Generation> {
    match method {
        Method::Bolt(base) => {
            let config = DecodeConfig {
                length: sample.length,
                seed: sample.seed,
                ..base.clone()
            };
            bolt_generate(models.generator, objective, prompt, &config)
        }
        Method::Langevin(base) => {
            let config = LangevinConfig {
                length: sample.length,
                seed: sample.seed,
                ..base.clone()
            };
            langevin_baseline_generate(models.generator, objective, prompt, &config)
        }
        Method::Greedy { repetition_penalty } => {
            let policy = LogitPolicy {
                repetition_penalty: *repetition_penalty,
                ..LogitPolicy::default()
            };
            let ids = greedy_decode(models.generator, prompt, sample.length, &policy)?;
            Ok(Generation {
                text: models.vocab().detokenize(&ids),
                ids,
                trace: Default::default(),
            })
        }
    }
}

fn run_sample(
    config: &RunConfig,
    models: ModelSet<'_>,
    sample: &PlannedSample,
) -> Result<(SampleResult, f64)> {
    let spec = &config.specs[sample.spec_index];
    let prompt = models.vocab().encode_strict(&config.prompts[sample.prompt_index])?;
    let objective = Objective::new(
        spec,
        EnergyModels {
            judge: models.generator,
            classifier: models.internal,
        },
    )?;
    let start = Instant::now();
    let g = decode(&config.method, models, &objective, &prompt, sample)?;
    let seconds = start.elapsed().as_secs_f64();
    if g.ids.is_empty() {
        return Err(Error::NonFinite("no rollout had a finite energy".into()));
    }
    let full: Vec<usize> = prompt.iter().chain(&g.ids).copied().collect();
    let score = |clf: Option<&crate::discriminator::AttributeClassifier>| -> Result<Option<AttributeScore>> {
        match (clf, measured_class(spec)) {
            (Some(c), Some(class)) => attribute_score(c, &full, class).map(Some),
            _ => Ok(None),
        }
    };
    let keywords = objective.keyword_ids();
    let (keyword_coverage, keyword_hit) = if keywords.is_empty() {
        (None, None)
    } else {
        let cov = keyword_coverage(&g.ids, keywords)?;
        (Some(cov), Some(keywords.iter().any(|k| g.ids.contains(k))))
    };
    let result = SampleResult {
        energy: g.energy(),
        trace_energies: g
            .trace
            .records
            .iter()
            .map(|r| r.finite.then_some(r.total))
            .collect(),
        budget: config.method.budget(),
        iterations_to_success: g.trace.iterations_to_success(),
        stopped_early: g.trace.stopped_early,
        rollbacks: g.trace.rollbacks,
        satisfied: objective.satisfied(&prompt, &g.ids)?,
        internal: score(models.internal)?,
        external: score(models.external)?,
        ppl: perplexity(models.judge, &full)?,
        rep3: rep_ngram(&g.ids, 3)?,
        keyword_coverage,
        keyword_hit,
        text: g.text,
        ids: g.ids,
    };
    Ok((result, seconds))
}

/// Generates and scores every planned sample. A failing sample is recorded
/// with its error and left out of the aggregates.
pub fn run_benchmark(config: &RunConfig, models: ModelSet<'_>) -> Result<BenchmarkRun> {
    let samples = plan(config)?;
    models.check()?;
    let done: Vec<(SampleRecord, SampleTiming)> = samples
        .par_iter()
        .map(|s| {
            let (outcome, timing) = match run_sample(config, models, s) {
                Ok((r, seconds)) => {
                    let timing = SampleTiming {
                        index: s.index,
                        tokens: r.ids.len(),
                        seconds,
                        succeeded: r.satisfied,
                    };
                    (Outcome::Ok(Box::new(r)), timing)
                }
                Err(e) => {
                    let timing = SampleTiming {
                        index: s.index,
                        tokens: 0,
                        seconds: 0.0,
                        succeeded: false,
                    };
                    (Outcome::Failed { error: e.to_string() }, timing)
                }
            };
            let record = SampleRecord {
                version: FORMAT_VERSION,
                plan: *s,
                prompt: config.prompts[s.prompt_index].clone(),
                outcome,
            };
            (record, timing)
        })
        .collect();
    let (records, timings): (Vec<_>, Vec<_>) = done.into_iter().unzip();
    let report = GenerationReport::from_records(config, &records, &timings);
    Ok(BenchmarkRun {
        config: config.clone(),
        records,
        timings,
        report,
    })
}
