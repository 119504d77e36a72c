//! The desk-scale model set: a generator LM, a separately trained judge LM
//! for perplexity, and two sentiment classifiers trained on disjoint data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticWorld;
use crate::discriminator::{
    train_classifier, AttributeClassifier, ClassifierConfig, ClassifierReport, ClassifierTrainConfig, LabeledCorpus,
};
use crate::error::{Error, Result};
use crate::lm::{train_lm, LmConfig, TrainConfig, TrainReport, TransformerLm, Vocab};

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const JUDGE_FILE: &str = "judge.ckpt";
pub const INTERNAL_FILE: &str = "internal.ckpt";
pub const EXTERNAL_FILE: &str = "external.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    /// Lines of synthetic text for each language model.
    pub lm_lines: usize,
    pub lm_epochs: usize,
    pub lm_width: usize,
    /// Labelled lines, split in half between the two classifiers.
    pub clf_lines: usize,
    pub clf_weight_decay: f64,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            lm_lines: 3000,
            lm_epochs: 8,
            lm_width: 64,
            clf_lines: 2000,
            clf_weight_decay: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DeskReport {
    pub generator: TrainReport,
    pub judge: TrainReport,
    pub internal: ClassifierReport,
    pub external: ClassifierReport,
}

#[derive(Clone, Debug)]
pub struct DeskModels {
    pub generator: TransformerLm,
    /// Scores perplexity only; never part of an energy.
    pub judge: TransformerLm,
    /// Supplies the soft-constraint energy.
    pub internal: AttributeClassifier,
    /// Held-out evaluator.
    pub external: AttributeClassifier,
}

impl DeskModels {
    /// Trains all four models. The two language models train in parallel.
    pub fn build(config: &DeskConfig) -> Result<(Self, DeskReport)> {
        let world = SyntheticWorld::default();
        let vocab = world.vocab()?;
        let lm_config = LmConfig {
            d_model: config.lm_width,
            ..LmConfig::desk(vocab.len())
        };
        let lm = |seed: u64| {
            let corpus = world.lm_corpus(config.lm_lines, seed);
            let train = TrainConfig {
                epochs: config.lm_epochs,
                seed,
                ..TrainConfig::default()
            };
            train_lm(&corpus, vocab.clone(), lm_config.clone(), &train)
        };
        let s = config.seed;
        let (generator, judge) = rayon::join(|| lm(s), || lm(s.wrapping_add(1)));
        let (generator, gen_report) = generator?;
        let (judge, judge_report) = judge?;

        let ((internal, int_report), (external, ext_report)) = classifiers(&world, &vocab, config)?;
        let models = DeskModels {
            generator,
            judge,
            internal,
            external,
        };
        models.check()?;
        let report = DeskReport {
            generator: gen_report,
            judge: judge_report,
            internal: int_report,
            external: ext_report,
        };
        Ok((models, report))
    }

    /// All four models must share one vocabulary.
    pub fn check(&self) -> Result<()> {
        let v = self.generator.vocab();
        if self.judge.vocab() != v || self.internal.vocab() != v || self.external.vocab() != v {
            return Err(Error::Config("desk models do not share one vocabulary".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.generator.save(&dir.join(GENERATOR_FILE))?;
        self.judge.save(&dir.join(JUDGE_FILE))?;
        self.internal.save(&dir.join(INTERNAL_FILE))?;
        self.external.save(&dir.join(EXTERNAL_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let models = DeskModels {
            generator: TransformerLm::load(&dir.join(GENERATOR_FILE))?,
            judge: TransformerLm::load(&dir.join(JUDGE_FILE))?,
            internal: AttributeClassifier::load(&dir.join(INTERNAL_FILE))?,
            external: AttributeClassifier::load(&dir.join(EXTERNAL_FILE))?,
        };
        models.check()?;
        Ok(models)
    }

    /// Retrains only the two classifiers.
    pub fn rebuild_classifiers(&mut self, config: &DeskConfig) -> Result<DeskReport> {
        let vocab = self.generator.vocab().clone();
        let ((internal, int_report), (external, ext_report)) =
            classifiers(&SyntheticWorld::default(), &vocab, config)?;
        self.internal = internal;
        self.external = external;
        Ok(DeskReport {
            internal: int_report,
            external: ext_report,
            ..DeskReport::default()
        })
    }

    /// Loads from `dir` when all four checkpoints are present, otherwise
    /// trains and saves them there.
    pub fn load_or_build(dir: &Path, config: &DeskConfig) -> Result<Self> {
        let files = [GENERATOR_FILE, JUDGE_FILE, INTERNAL_FILE, EXTERNAL_FILE];
        if files.iter().all(|f| dir.join(f).is_file()) {
            return Self::load(dir);
        }
        let (models, _) = Self::build(config)?;
        models.save(dir)?;
        Ok(models)
    }
}

type Trained = (AttributeClassifier, ClassifierReport);

/// Trains the internal and external classifiers on the two halves of one
/// labelled corpus.
fn classifiers(world: &SyntheticWorld, vocab: &Vocab, config: &DeskConfig) -> Result<(Trained, Trained)> {
    let s = config.seed;
    let labelled = world.labeled_lines(config.clf_lines, s.wrapping_add(2));
    let corpus = LabeledCorpus::new(
        labelled
            .into_iter()
            .map(|(text, p)| (text, p.label().to_string()))
            .collect(),
    )?;
    let (first, second) = corpus.split(0.5, s.wrapping_add(3));
    let clf = |part: &LabeledCorpus, seed: u64| {
        let train = ClassifierTrainConfig {
            seed,
            weight_decay: config.clf_weight_decay,
            ..ClassifierTrainConfig::default()
        };
        train_classifier(part, vocab.clone(), ClassifierConfig::default(), &train)
    };
    Ok((clf(&first, s.wrapping_add(4))?, clf(&second, s.wrapping_add(5))?))
}
