//! Small random models shared by the harness tests.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{NEGATIVE, POSITIVE};
use crate::discriminator::{AttributeClassifier, ClassifierConfig};
use crate::energy::EnergySpec;
use crate::lm::{LmConfig, TransformerLm, Vocab};

use super::config::{desk_decode, CheckpointPaths, Method, ModelSet, RunConfig, TaskKind};

pub struct Fixture {
    pub generator: TransformerLm,
    pub judge: TransformerLm,
    pub internal: AttributeClassifier,
    pub external: AttributeClassifier,
}

fn lm(vocab: &Vocab, seed: u64) -> TransformerLm {
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 32,
        dropout: 0.0,
    };
    let mut lm = TransformerLm::init(vocab.clone(), cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    for p in lm.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    lm
}

impl Fixture {
    pub fn new() -> Self {
        let words: Vec<String> = (0..16).map(|i| format!("w{i:02}")).collect();
        let vocab = Vocab::from_texts(words.iter().map(String::as_str)).unwrap();
        let classes = vec![NEGATIVE.to_string(), POSITIVE.to_string()];
        let clf = |seed| AttributeClassifier::init(vocab.clone(), classes.clone(), ClassifierConfig::default(), seed);
        Fixture {
            generator: lm(&vocab, 1),
            judge: lm(&vocab, 2),
            internal: clf(3).unwrap(),
            external: clf(4).unwrap(),
        }
    }

    pub fn models(&self) -> ModelSet<'_> {
        ModelSet {
            generator: &self.generator,
            judge: &self.judge,
            internal: Some(&self.internal),
            external: Some(&self.external),
        }
    }
}

pub fn soft_config() -> RunConfig {
    RunConfig {
        task: TaskKind::SoftAttribute,
        prompts: vec!["w01 w02".into(), "w03".into()],
        lengths: vec![3, 5],
        generations_per_prompt: 2,
        specs: vec![EnergySpec::soft(POSITIVE), EnergySpec::soft(NEGATIVE)],
        method: Method::Bolt(crate::decoder::DecodeConfig {
            max_iterations: 2,
            ..desk_decode(TaskKind::SoftAttribute)
        }),
        checkpoints: CheckpointPaths::default(),
        output_dir: PathBuf::from("unused"),
        seed: 7,
    }
}

pub fn keyword_config() -> RunConfig {
    RunConfig {
        task: TaskKind::KeywordTopic,
        specs: vec![EnergySpec::keywords_any(&["w05"]), EnergySpec::keywords_any(&["w09"])],
        method: Method::Bolt(crate::decoder::DecodeConfig {
            max_iterations: 4,
            ..desk_decode(TaskKind::KeywordTopic)
        }),
        ..soft_config()
    }
}
