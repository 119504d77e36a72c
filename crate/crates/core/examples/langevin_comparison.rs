//! Compares BOLT with the Langevin-dynamics baseline on single-keyword topic
//! control under the same energy, stop rule and iteration budget.
//!
//! cargo run --release --example langevin_comparison -- [models-dir] [out-dir]

use std::path::PathBuf;

use bolt::corpus::bundled_topics;
use bolt::decoder::LangevinConfig;
use bolt::harness::config::single_keyword_specs;
use bolt::harness::{run_benchmark, DeskConfig, DeskModels, Method, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "desk-models".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/langevin".into()));
    let models = DeskModels::load_or_build(&dir, &DeskConfig::default())?;
    let topics = bundled_topics();
    let prompts: Vec<String> = bolt::corpus::bundled_prompts().into_iter().step_by(4).collect();

    let mut bolt_config = RunConfig::keyword_topic(prompts, &topics, &dir, &out.join("bolt"));
    bolt_config.specs = single_keyword_specs(&topics).into_iter().take(12).collect();
    let langevin_config = RunConfig {
        method: Method::Langevin(LangevinConfig {
            max_iterations: bolt_config.method.budget(),
            ..LangevinConfig::default()
        }),
        output_dir: out.join("langevin"),
        ..bolt_config.clone()
    };

    let mut medians = Vec::new();
    for c in [&bolt_config, &langevin_config] {
        let run = run_benchmark(c, (&models).into())?;
        run.persist(&c.output_dir)?;
        let (o, speed) = (&run.report.overall, &run.report.speed);
        println!(
            "{:>8}: success {:.3?}  median iterations {:?}  seconds/success {:.3?}  iterations {:?}",
            c.method.name(),
            o.success,
            o.median_iterations_to_success,
            speed.seconds_per_success,
            o.iterations_to_success
        );
        medians.push(o.median_iterations_to_success.unwrap_or(f64::NAN));
    }
    println!("median iteration ratio langevin / bolt: {:.1}", medians[1] / medians[0]);
    Ok(())
}
