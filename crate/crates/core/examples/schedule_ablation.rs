//! Runs the sentiment task once per bias weight schedule (t/L, 1-t/L, 1 and
//! a learned per-position weight) and prints the ablation table.
//!
//! cargo run --release --example schedule_ablation -- [models-dir] [out-dir]

use std::path::PathBuf;

use bolt::harness::sweep::schedule_ablation;
use bolt::harness::{DeskConfig, DeskModels, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk-models".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/schedules".into()));
    let models = DeskModels::load_or_build(&dir, &DeskConfig::default())?;

    let mut config = RunConfig::sentiment(bolt::corpus::bundled_prompts(), &dir, &out);
    config.lengths = vec![12];
    config.generations_per_prompt = 1;

    let table = schedule_ablation(&config, (&models).into())?;
    table.persist(&out)?;
    print!("{}", table.render());
    Ok(())
}
