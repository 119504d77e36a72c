//! Runs the sentiment benchmark with BOLT and with greedy decoding, writes the
//! per-sample records and reports, and prints the headline metrics.
//!
//! cargo run --release --example sentiment_benchmark -- [models-dir] [out-dir] [generations-per-prompt]
//!
//! The full plan is 15 prompts x 2 classes x 3 lengths x 20 generations; the
//! default of 2 generations per prompt keeps the run short.

use std::path::PathBuf;

use bolt::harness::{run_benchmark, DeskConfig, DeskModels, Method, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk-models".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/sentiment".into()));
    let gens: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let models = DeskModels::load_or_build(&dir, &DeskConfig::default())?;

    let mut config = RunConfig::sentiment(bolt::corpus::bundled_prompts(), &dir, &out.join("bolt"));
    config.generations_per_prompt = gens;
    let greedy = RunConfig {
        method: Method::Greedy { repetition_penalty: 1.2 },
        output_dir: out.join("greedy"),
        ..config.clone()
    };

    for c in [&config, &greedy] {
        let run = run_benchmark(c, (&models).into())?;
        run.persist(&c.output_dir)?;
        let o = &run.report.overall;
        println!(
            "{:>6}: {} samples  int {:.3?}  ext {:.3?}  ppl {:.2?}  dist-3 {:.3?}  rep-3 {:.2?}  {:.1} tok/s",
            c.method.name(),
            o.samples,
            o.internal.map(|m| m.accuracy),
            o.external.map(|m| m.accuracy),
            o.ppl,
            o.dist3,
            o.rep3,
            run.report.speed.tokens_per_second.unwrap_or(0.0)
        );
        for s in &run.report.per_spec {
            println!(
                "        {:?}: int {:.3?}",
                s.spec.constraint,
                s.metrics.internal.map(|m| m.accuracy)
            );
        }
    }
    println!("records and reports written under {}", out.display());
    Ok(())
}
