//! Steers a continuation towards a keyword and prints the optimisation trace.
//!
//! cargo run --release --example keyword_generate -- [models-dir] [keyword] [prompt]

use std::path::PathBuf;

use bolt::decoder::{bolt_generate, DecodeConfig};
use bolt::energy::{EnergyModels, EnergySpec, Objective};
use bolt::harness::config::desk_decode;
use bolt::harness::{DeskConfig, DeskModels, TaskKind};
use bolt::lm::{greedy_decode, LogitPolicy};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk-models".into()));
    let keyword = args.next().unwrap_or_else(|| "planet".into());
    let prompt = args.next().unwrap_or_else(|| "The book".into());
    let models = DeskModels::load_or_build(&dir, &DeskConfig::default())?;
    let lm = &models.generator;

    let spec = EnergySpec::keywords_any(&[keyword.as_str()]);
    let objective = Objective::new(
        &spec,
        EnergyModels {
            judge: lm,
            classifier: None,
        },
    )?;
    let ids = lm.vocab().encode_strict(&prompt)?;
    let config = DecodeConfig {
        length: 12,
        ..desk_decode(TaskKind::KeywordTopic)
    };

    let greedy = greedy_decode(lm, &ids, config.length, &LogitPolicy::default())?;
    println!("greedy: {prompt} | {}", lm.vocab().detokenize(&greedy));

    let g = bolt_generate(lm, &objective, &ids, &config)?;
    for r in &g.trace.records {
        println!(
            "iter {:2}  energy {:8.4}  hit {}  {}",
            r.iteration,
            r.total,
            r.satisfied,
            lm.vocab().detokenize(&r.ids)
        );
    }
    println!("bolt:   {prompt} | {}", g.text);
    println!(
        "keyword '{keyword}' reached after {:?} updates",
        g.trace.iterations_to_success()
    );
    Ok(())
}
