//! Writes a multi-keyword benchmark config to JSON, reads it back and runs it
//! with the checkpoints it names. Edit the JSON and rerun with its path to
//! benchmark another setup.
//!
//! cargo run --release --example benchmark_from_config -- [config.json]

use std::path::{Path, PathBuf};

use bolt::corpus::{bundled_prompts, bundled_topics};
use bolt::harness::{run_benchmark, DeskConfig, DeskModels, RunConfig};

fn main() -> anyhow::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = Path::new("desk-models");
            DeskModels::load_or_build(dir, &DeskConfig::default())?;
            let topics = bundled_topics();
            let prompts = bundled_prompts().into_iter().take(3).collect();
            let config = RunConfig::multi_keyword(prompts, &topics, 3, dir, Path::new("runs/multi-keyword"));
            let path = PathBuf::from("runs/multi-keyword.json");
            std::fs::create_dir_all("runs")?;
            config.save(&path)?;
            println!("wrote {}", path.display());
            path
        }
    };
    let config = RunConfig::load(&path)?;
    let models = config.load_models()?;
    let run = run_benchmark(&config, models.view())?;
    run.persist(&config.output_dir)?;
    let o = &run.report.overall;
    println!(
        "{} samples: coverage {:.3?}  success {:.3?}  mean iterations {:.1?}  ppl {:.2?}",
        o.samples, o.coverage, o.success, o.mean_iterations, o.ppl
    );
    println!("records in {}", config.output_dir.join("samples.jsonl").display());
    Ok(())
}
