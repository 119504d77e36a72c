//! Trains the four desk-scale models (generator LM, perplexity judge LM,
//! internal and external sentiment classifiers) and saves them to a directory
//! that the other examples load from.
//!
//! cargo run --release --example desk_models -- [dir]

use std::path::PathBuf;
use std::time::Instant;

use bolt::harness::{DeskConfig, DeskModels};

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk-models".into()));
    let config = DeskConfig::default();
    let start = Instant::now();
    let (models, report) = DeskModels::build(&config)?;
    models.save(&dir)?;
    println!("trained in {:.1}s, saved to {}", start.elapsed().as_secs_f64(), dir.display());
    println!("vocabulary size {}", models.generator.vocab().len());
    println!(
        "generator held-out ppl {:.2} -> {:.2}",
        report.generator.heldout_ppl_before(),
        report.generator.heldout_ppl_after()
    );
    println!(
        "judge held-out ppl {:.2} -> {:.2}",
        report.judge.heldout_ppl_before(),
        report.judge.heldout_ppl_after()
    );
    println!(
        "classifier held-out accuracy: internal {:.3}, external {:.3}",
        report.internal.heldout_accuracy, report.external.heldout_accuracy
    );
    Ok(())
}
