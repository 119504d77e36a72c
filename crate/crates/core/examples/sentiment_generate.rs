//! Steers one prompt towards each sentiment, then avoids the negative class,
//! and scores every output with the held-out classifier.
//!
//! cargo run --release --example sentiment_generate -- [models-dir] [prompt]

use std::path::PathBuf;

use bolt::decoder::{bolt_generate, DecodeConfig};
use bolt::energy::{EnergyModels, EnergySpec, Objective};
use bolt::harness::config::desk_decode;
use bolt::harness::{DeskConfig, DeskModels, TaskKind};
use bolt::lm::{greedy_decode, perplexity, LogitPolicy};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk-models".into()));
    let prompt = args.next().unwrap_or_else(|| "The movie".into());
    let models = DeskModels::load_or_build(&dir, &DeskConfig::default())?;
    let lm = &models.generator;
    let energy_models = EnergyModels {
        judge: lm,
        classifier: Some(&models.internal),
    };
    let ids = lm.vocab().encode_strict(&prompt)?;

    let greedy = greedy_decode(lm, &ids, 12, &LogitPolicy::default())?;
    report("greedy", &models, &ids, &greedy)?;

    let runs = [
        ("positive", EnergySpec::soft("positive"), TaskKind::SoftAttribute),
        ("negative", EnergySpec::soft("negative"), TaskKind::SoftAttribute),
        ("avoid negative", EnergySpec::avoid("positive", "negative"), TaskKind::AttributeAvoidance),
    ];
    for (name, spec, task) in runs {
        let objective = Objective::new(&spec, energy_models)?;
        let config = DecodeConfig {
            length: 12,
            ..desk_decode(task)
        };
        let g = bolt_generate(lm, &objective, &ids, &config)?;
        report(name, &models, &ids, &g.ids)?;
    }
    Ok(())
}

fn report(name: &str, models: &DeskModels, prompt: &[usize], out: &[usize]) -> anyhow::Result<()> {
    let full: Vec<usize> = prompt.iter().chain(out).copied().collect();
    let vocab = models.generator.vocab();
    println!(
        "{name:>15}: p_ext(positive) {:.3}  ppl {:6.2}  {} | {}",
        models.external.predict_ids(out)?[models.external.class_index("positive")?],
        perplexity(&models.judge, &full)?,
        vocab.detokenize(prompt),
        vocab.detokenize(out)
    );
    Ok(())
}
