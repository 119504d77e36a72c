//! Sweeps the fluency weight over a grid on a small sentiment plan and picks
//! the most controllable weight whose perplexity stays within 1.5x greedy.
//!
//! cargo run --release --example lambda_sweep -- [models-dir] [out-dir]

use std::path::PathBuf;

use bolt::harness::sweep::{lambda_sweep, LAMBDA_GRID};
use bolt::harness::{DeskConfig, DeskModels, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk-models".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/lambda".into()));
    let models = DeskModels::load_or_build(&dir, &DeskConfig::default())?;

    let prompts = bolt::corpus::bundled_prompts().into_iter().take(5).collect();
    let mut config = RunConfig::sentiment(prompts, &dir, &out);
    config.lengths = vec![12];
    config.generations_per_prompt = 1;

    let table = lambda_sweep(&config, (&models).into(), &LAMBDA_GRID)?;
    table.persist(&out)?;
    print!("{}", table.render());
    println!("recommended lambda: {:?}", table.recommended);
    Ok(())
}
