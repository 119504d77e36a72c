//! Run configuration: what to generate, with which decoder and models.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Topic, NEGATIVE, POSITIVE};
use crate::decoder::{DecodeConfig, FeedbackGradient, LangevinConfig, ScheduleKind};
use crate::discriminator::AttributeClassifier;
use crate::energy::{Constraint, EnergySpec, StopRule};
use crate::error::{Error, Result};
use crate::lm::{TransformerLm, Vocab};

use super::desk::{DeskModels, EXTERNAL_FILE, GENERATOR_FILE, INTERNAL_FILE, JUDGE_FILE};

/// Version tag written into every persisted record and report.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SoftAttribute,
    AttributeAvoidance,
    KeywordTopic,
    MultiKeyword,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SoftAttribute => "soft-attribute",
            TaskKind::AttributeAvoidance => "attribute-avoidance",
            TaskKind::KeywordTopic => "keyword-topic",
            TaskKind::MultiKeyword => "multi-keyword",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            TaskKind::SoftAttribute,
            TaskKind::AttributeAvoidance,
            TaskKind::KeywordTopic,
            TaskKind::MultiKeyword,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }

    fn check_spec(self, spec: &EnergySpec) -> Result<()> {
        let ok = match (self, &spec.constraint) {
            (TaskKind::SoftAttribute, Constraint::Soft { .. }) => true,
            (TaskKind::AttributeAvoidance, Constraint::Soft { .. }) => {
                matches!(spec.stop, StopRule::AttributeBelow { .. })
            }
            (TaskKind::KeywordTopic, Constraint::Hard { .. }) => true,
            (TaskKind::MultiKeyword, Constraint::Hard { keywords }) => keywords.len() >= 2,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!("energy spec does not fit a {} task", self.name())));
        }
        Ok(())
    }
}

/// The decoder a run uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Bolt(DecodeConfig),
    Langevin(LangevinConfig),
    /// Unconstrained greedy decoding; the energy spec only selects what is measured.
    Greedy { repetition_penalty: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bolt(_) => "bolt",
            Method::Langevin(_) => "langevin",
            Method::Greedy { .. } => "greedy",
        }
    }

    /// Optimiser updates allowed per sample.
    pub fn budget(&self) -> usize {
        match self {
            Method::Bolt(c) => c.max_iterations,
            Method::Langevin(c) => c.max_iterations,
            Method::Greedy { .. } => 0,
        }
    }

    pub fn set_max_iterations(&mut self, n: usize) {
        match self {
            Method::Bolt(c) => c.max_iterations = n,
            Method::Langevin(c) => c.max_iterations = n,
            Method::Greedy { .. } => {}
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Method::Bolt(c) => c.validate(),
            Method::Langevin(c) => c.validate(),
            Method::Greedy { repetition_penalty } if *repetition_penalty >= 1.0 => Ok(()),
            Method::Greedy { .. } => Err(Error::Config("repetition penalty must be >= 1".into())),
        }
    }
}

/// Checkpoint files of a run. The classifiers are needed only by attribute
/// tasks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPaths {
    /// Language model being steered; also scores the fluency energy.
    pub generator: PathBuf,
    /// Language model used only for perplexity.
    pub judge: PathBuf,
    /// Classifier behind the soft-constraint energy.
    #[serde(default)]
    pub internal: Option<PathBuf>,
    /// Held-out classifier used only for evaluation.
    #[serde(default)]
    pub external: Option<PathBuf>,
}

impl CheckpointPaths {
    /// The standard file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        CheckpointPaths {
            generator: dir.join(GENERATOR_FILE),
            judge: dir.join(JUDGE_FILE),
            internal: Some(dir.join(INTERNAL_FILE)),
            external: Some(dir.join(EXTERNAL_FILE)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub prompts: Vec<String>,
    /// Continuation lengths; every prompt is run at each.
    pub lengths: Vec<usize>,
    pub generations_per_prompt: usize,
    /// One block of samples per spec, e.g. one per target attribute.
    pub specs: Vec<EnergySpec>,
    pub method: Method,
    pub checkpoints: CheckpointPaths,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Structural checks that need no model files.
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Config("prompt list is empty".into()));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Config("lengths must be a nonempty list of positive values".into()));
        }
        if self.generations_per_prompt == 0 {
            return Err(Error::Config("generations per prompt must be at least 1".into()));
        }
        if self.specs.is_empty() {
            return Err(Error::Config("at least one energy spec is required".into()));
        }
        for spec in &self.specs {
            self.task.check_spec(spec)?;
        }
        self.method.validate()
    }

    pub fn planned_samples(&self) -> usize {
        self.specs.len() * self.lengths.len() * self.prompts.len() * self.generations_per_prompt
    }

    /// Loads the referenced checkpoints and checks they share one vocabulary.
    pub fn load_models(&self) -> Result<RunModels> {
        let missing = |p: &Path| Error::Config(format!("checkpoint {} does not exist", p.display()));
        let mut paths = vec![&self.checkpoints.generator, &self.checkpoints.judge];
        paths.extend(self.checkpoints.internal.iter());
        paths.extend(self.checkpoints.external.iter());
        if let Some(p) = paths.iter().find(|p| !p.is_file()) {
            return Err(missing(p));
        }
        let load_clf = |p: &Option<PathBuf>| p.as_deref().map(AttributeClassifier::load).transpose();
        let models = RunModels {
            generator: TransformerLm::load(&self.checkpoints.generator)?,
            judge: TransformerLm::load(&self.checkpoints.judge)?,
            internal: load_clf(&self.checkpoints.internal)?,
            external: load_clf(&self.checkpoints.external)?,
        };
        models.view().check()?;
        Ok(models)
    }
}

/// Command-line style adjustments to a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Applies to BOLT runs only.
    pub schedule: Option<ScheduleKind>,
    /// Fluency weight of every spec.
    pub lambda: Option<f64>,
    pub max_iterations: Option<usize>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(kind) = o.schedule {
            match &mut self.method {
                Method::Bolt(c) => c.schedule = kind,
                _ => return Err(Error::Config("a schedule applies only to BOLT runs".into())),
            }
        }
        if let Some(lambda) = o.lambda {
            self.specs.iter_mut().for_each(|s| s.lambda = lambda);
        }
        if let Some(n) = o.max_iterations {
            self.method.set_max_iterations(n);
        }
        self.validate()
    }
}

/// Owned models of a run loaded from disk.
#[derive(Clone, Debug)]
pub struct RunModels {
    pub generator: TransformerLm,
    pub judge: TransformerLm,
    pub internal: Option<AttributeClassifier>,
    pub external: Option<AttributeClassifier>,
}

impl RunModels {
    pub fn view(&self) -> ModelSet<'_> {
        ModelSet {
            generator: &self.generator,
            judge: &self.judge,
            internal: self.internal.as_ref(),
            external: self.external.as_ref(),
        }
    }
}

/// Borrowed models a benchmark runs against.
#[derive(Clone, Copy, Debug)]
pub struct ModelSet<'a> {
    pub generator: &'a TransformerLm,
    pub judge: &'a TransformerLm,
    pub internal: Option<&'a AttributeClassifier>,
    pub external: Option<&'a AttributeClassifier>,
}

impl<'a> ModelSet<'a> {
    pub fn vocab(&self) -> &'a Vocab {
        self.generator.vocab()
    }

    pub fn check(&self) -> Result<()> {
        let v = self.vocab();
        let clfs = self.internal.iter().chain(self.external.iter());
        if self.judge.vocab() != v || clfs.into_iter().any(|c| c.vocab() != v) {
            return Err(Error::Config("models do not share one vocabulary".into()));
        }
        Ok(())
    }
}

impl<'a> From<&'a DeskModels> for ModelSet<'a> {
    fn from(m: &'a DeskModels) -> Self {
        ModelSet {
            generator: &m.generator,
            judge: &m.judge,
            internal: Some(&m.internal),
            external: Some(&m.external),
        }
    }
}

/// BOLT settings for the desk models. The language-model input path is
/// detached and the step size is larger than the default.
pub fn desk_decode(task: TaskKind) -> DecodeConfig {
    let (max_iterations, schedule, lr) = match task {
        TaskKind::SoftAttribute | TaskKind::AttributeAvoidance => (8, ScheduleKind::Decreasing, DESK_SOFT_LR),
        TaskKind::KeywordTopic => (50, ScheduleKind::Constant, DESK_LR),
        TaskKind::MultiKeyword => (100, ScheduleKind::Decreasing, DESK_LR),
    };
    DecodeConfig {
        max_iterations,
        schedule,
        lr,
        init_std: DESK_INIT_STD,
        feedback: FeedbackGradient::Direct,
        ..DecodeConfig::default()
    }
}

/// Step size for keyword tasks with the desk models.
pub const DESK_LR: f64 = 0.2;

/// Step size for attribute tasks, whose budget is only 8 updates.
pub const DESK_SOFT_LR: f64 = 0.35;

/// Initial spread of the bias parameters used with the desk models.
pub const DESK_INIT_STD: f64 = 0.5;

/// Single-keyword specs, one per keyword of every topic.
pub fn single_keyword_specs(topics: &[Topic]) -> Vec<EnergySpec> {
    topics
        .iter()
        .flat_map(|t| t.keywords.iter())
        .map(|k| EnergySpec::keywords_any(&[k.as_str()]))
        .collect()
}

/// Specs requiring `n` keywords each, taken in order from every topic.
pub fn multi_keyword_specs(topics: &[Topic], n: usize) -> Vec<EnergySpec> {
    topics
        .iter()
        .filter(|t| t.keywords.len() >= n)
        .map(|t| {
            let kws: Vec<&str> = t.keywords.iter().take(n).map(String::as_str).collect();
            EnergySpec::keywords_all(&kws)
        })
        .collect()
}

impl RunConfig {
    /// The sentiment protocol: every prompt, three lengths, both attributes,
    /// run with BOLT on the desk models in `model_dir`.
    pub fn sentiment(prompts: Vec<String>, model_dir: &Path, output_dir: &Path) -> Self {
        RunConfig {
            task: TaskKind::SoftAttribute,
            prompts,
            lengths: vec![12, 20, 50],
            generations_per_prompt: 20,
            specs: vec![EnergySpec::soft(POSITIVE), EnergySpec::soft(NEGATIVE)],
            method: Method::Bolt(desk_decode(TaskKind::SoftAttribute)),
            checkpoints: CheckpointPaths::in_dir(model_dir),
            output_dir: output_dir.to_path_buf(),
            seed: 0,
        }
    }

    /// Keyword-guided topic control with one spec per keyword.
    pub fn keyword_topic(prompts: Vec<String>, topics: &[Topic], model_dir: &Path, output_dir: &Path) -> Self {
        RunConfig {
            task: TaskKind::KeywordTopic,
            prompts,
            lengths: vec![12],
            generations_per_prompt: 1,
            specs: single_keyword_specs(topics),
            method: Method::Bolt(desk_decode(TaskKind::KeywordTopic)),
            checkpoints: CheckpointPaths::in_dir(model_dir),
            output_dir: output_dir.to_path_buf(),
            seed: 0,
        }
    }

    /// Lexically constrained generation: every spec requires the first `n`
    /// keywords of a topic. Generations are long enough to fit them in
    /// separate clauses.
    pub fn multi_keyword(prompts: Vec<String>, topics: &[Topic], n: usize, model_dir: &Path, output_dir: &Path) -> Self {
        RunConfig {
            task: TaskKind::MultiKeyword,
            lengths: vec![32],
            specs: multi_keyword_specs(topics, n),
            method: Method::Bolt(desk_decode(TaskKind::MultiKeyword)),
            ..Self::keyword_topic(prompts, topics, model_dir, output_dir)
        }
    }
}
