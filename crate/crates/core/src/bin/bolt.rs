//! Command-line front end over the `bolt` library.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bolt::autodiff::op_kind_suite;
use bolt::corpus::{bundled_prompts, bundled_topics, parse_prompts, parse_topics, SyntheticWorld};
use bolt::decoder::{
    bias_grad_check, bolt_generate, langevin_baseline_generate, DecodeConfig, Generation, LangevinConfig,
    ScheduleKind,
};
use bolt::discriminator::{train_classifier, AttributeClassifier, ClassifierConfig, ClassifierTrainConfig, LabeledCorpus};
use bolt::energy::{EnergyModels, EnergySpec, Objective};
use bolt::harness::bench::{plan, run_benchmark};
use bolt::harness::config::{desk_decode, Overrides, RunConfig, TaskKind};
use bolt::harness::sweep::{lambda_sweep, LAMBDA_GRID};
use bolt::harness::{DeskConfig, DeskModels};
use bolt::lm::{train_lm, LmConfig, TrainConfig, TransformerLm, Vocab};

#[derive(Parser)]
#[command(name = "bolt", version, about = "Tunable logit biases for controlled text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a language model on a one-line-per-sample corpus.
    TrainLm(TrainLmArgs),
    /// Train an attribute classifier on a `text<TAB>label` corpus.
    TrainClf(TrainClfArgs),
    /// Train the four desk-scale models on the synthetic corpus.
    Desk(DeskArgs),
    /// Write a ready-to-run benchmark config for a task.
    InitConfig(InitConfigArgs),
    /// Generate one continuation under a constraint.
    Generate(GenerateArgs),
    /// Run a benchmark config and write records and report.
    Benchmark(BenchmarkArgs),
    /// Check tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate a benchmark config over a grid of fluency weights.
    LambdaSweep(SweepArgs),
}

#[derive(Args)]
struct RunFlags {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    /// Fluency weight for every spec.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            schedule: self.schedule.map(Schedule::kind),
            lambda: self.lambda,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Increasing,
    Decreasing,
    Constant,
    Learned,
}

impl Schedule {
    fn kind(self) -> ScheduleKind {
        match self {
            Schedule::Increasing => ScheduleKind::Increasing,
            Schedule::Decreasing => ScheduleKind::Decreasing,
            Schedule::Constant => ScheduleKind::Constant,
            Schedule::Learned => ScheduleKind::Learned,
        }
    }
}

#[derive(Args)]
struct TrainLmArgs {
    /// Plain-text corpus; the synthetic corpus is used when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    synthetic_lines: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainClfArgs {
    /// `text<TAB>label` corpus; the synthetic sentiment corpus is used when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    synthetic_lines: usize,
    /// Language-model checkpoint whose vocabulary the classifier adopts.
    #[arg(long)]
    vocab_from: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Sentiment,
    Keyword,
    MultiKeyword,
}

#[derive(Args)]
struct InitConfigArgs {
    #[arg(long, value_enum)]
    task: Task,
    /// Directory holding the desk checkpoints.
    #[arg(long)]
    models: PathBuf,
    /// Prompt file, one per line; the bundled prompts when absent.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Keyword file, `topic: w1,w2,w3,w4` per line; the bundled topics when absent.
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoder {
    Bolt,
    Langevin,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Target attribute class.
    #[arg(long, conflicts_with = "keywords")]
    class: Option<String>,
    /// Comma-separated keywords; every one is required.
    #[arg(long, value_delimiter = ',')]
    keywords: Vec<String>,
    #[arg(long, default_value_t = 12)]
    length: usize,
    #[arg(long, value_enum, default_value = "bolt")]
    method: Decoder,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: PathBuf,
    /// Validate the config and print the plan size without decoding.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Desk model directory for the end-to-end check; small random models otherwise.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated λ values; 0.0 to 1.0 in steps of 0.1 when absent.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    #[command(flatten)]
    run: RunFlags,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::TrainClf(a) => train_clf_cmd(a),
        Command::Desk(a) => desk_cmd(a),
        Command::InitConfig(a) => init_config_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Benchmark(a) => benchmark_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::LambdaSweep(a) => sweep_cmd(a),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn train_lm_cmd(a: TrainLmArgs) -> Result<()> {
    let corpus: Vec<String> = match &a.corpus {
        Some(p) => read(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        None => SyntheticWorld::default().lm_corpus(a.synthetic_lines, a.seed),
    };
    let vocab = match &a.corpus {
        Some(_) => Vocab::from_texts(corpus.iter().map(String::as_str))?,
        None => SyntheticWorld::default().vocab()?,
    };
    let config = LmConfig {
        d_model: a.width,
        ..LmConfig::desk(vocab.len())
    };
    let train = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (lm, report) = train_lm(&corpus, vocab, config, &train)?;
    lm.save(&a.out)?;
    println!(
        "held-out perplexity {:.3} -> {:.3}; saved {}",
        report.heldout_ppl_before(),
        report.heldout_ppl_after(),
        a.out.display()
    );
    Ok(())
}

fn train_clf_cmd(a: TrainClfArgs) -> Result<()> {
    let corpus = match &a.corpus {
        Some(p) => LabeledCorpus::load(p)?,
        None => LabeledCorpus::new(
            SyntheticWorld::default()
                .labeled_lines(a.synthetic_lines, a.seed)
                .into_iter()
                .map(|(t, p)| (t, p.label().to_string()))
                .collect(),
        )?,
    };
    let vocab = TransformerLm::load(&a.vocab_from)?.vocab().clone();
    let train = ClassifierTrainConfig {
        seed: a.seed,
        weight_decay: a.weight_decay,
        ..ClassifierTrainConfig::default()
    };
    let (clf, report) = train_classifier(&corpus, vocab, ClassifierConfig::default(), &train)?;
    clf.save(&a.out)?;
    println!("held-out accuracy {:.4}; saved {}", report.heldout_accuracy, a.out.display());
    Ok(())
}

fn desk_cmd(a: DeskArgs) -> Result<()> {
    let config = DeskConfig {
        seed: a.seed,
        ..DeskConfig::default()
    };
    let (models, report) = DeskModels::build(&config)?;
    models.save(&a.output_dir)?;
    println!(
        "generator ppl {:.3}, judge ppl {:.3}, internal acc {:.4}, external acc {:.4}; saved {}",
        report.generator.heldout_ppl_after(),
        report.judge.heldout_ppl_after(),
        report.internal.heldout_accuracy,
        report.external.heldout_accuracy,
        a.output_dir.display()
    );
    Ok(())
}

fn init_config_cmd(a: InitConfigArgs) -> Result<()> {
    let prompts = match &a.prompts {
        Some(p) => parse_prompts(&read(p)?)?,
        None => bundled_prompts(),
    };
    let topics = match &a.keywords {
        Some(p) => parse_topics(&read(p)?)?,
        None => bundled_topics(),
    };
    let out_dir = a.run.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/benchmark"));
    let mut config = match a.task {
        Task::Sentiment => RunConfig::sentiment(prompts, &a.models, &out_dir),
        Task::Keyword => RunConfig::keyword_topic(prompts, &topics, &a.models, &out_dir),
        Task::MultiKeyword => RunConfig::multi_keyword(prompts, &topics, 3, &a.models, &out_dir),
    };
    config.apply(&a.run.overrides())?;
    config.save(&a.out)?;
    println!("{} samples planned; wrote {}", config.planned_samples(), a.out.display());
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let models = DeskModels::load(&a.models)?;
    let (spec, task) = match (&a.class, a.keywords.as_slice()) {
        (Some(class), _) => (EnergySpec::soft(class), TaskKind::SoftAttribute),
        (None, []) => bail!("give --class or --keywords"),
        (None, [one]) => (EnergySpec::keywords_any(&[one.as_str()]), TaskKind::KeywordTopic),
        (None, many) => {
            let words: Vec<&str> = many.iter().map(String::as_str).collect();
            (EnergySpec::keywords_all(&words), TaskKind::MultiKeyword)
        }
    };
    let spec = match a.run.lambda {
        Some(l) => spec.with_lambda(l),
        None => spec,
    };
    let objective = Objective::new(
        &spec,
        EnergyModels {
            judge: &models.generator,
            classifier: Some(&models.internal),
        },
    )?;
    let prompt = models.generator.vocab().encode_strict(&a.prompt)?;
    let seed = a.run.seed.unwrap_or(0);
    let g: Generation = match a.method {
        Decoder::Bolt => {
            let base = desk_decode(task);
            let config = DecodeConfig {
                length: a.length,
                seed,
                schedule: a.run.schedule.map_or(base.schedule, Schedule::kind),
                max_iterations: a.run.max_iterations.unwrap_or(base.max_iterations),
                ..base
            };
            bolt_generate(&models.generator, &objective, &prompt, &config)?
        }
        Decoder::Langevin => {
            let base = LangevinConfig::default();
            let config = LangevinConfig {
                length: a.length,
                seed,
                max_iterations: a.run.max_iterations.unwrap_or(base.max_iterations),
                ..base
            };
            langevin_baseline_generate(&models.generator, &objective, &prompt, &config)?
        }
    };
    println!("{} | {}", a.prompt, g.text);
    println!(
        "energy {:?}, rollouts {}, iterations to success {:?}",
        g.energy(),
        g.trace.records.len(),
        g.trace.iterations_to_success()
    );
    if let Some(dir) = &a.run.output_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("generation.json");
        std::fs::write(&path, serde_json::to_string_pretty(&g)?)?;
        println!("trace written to {}", path.display());
    }
    Ok(())
}

fn benchmark_cmd(a: BenchmarkArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    config.apply(&a.run.overrides())?;
    let planned = plan(&config)?;
    if a.dry_run {
        println!("config valid; {} samples planned", planned.len());
        return Ok(());
    }
    let models = config.load_models()?;
    let run = run_benchmark(&config, models.view())?;
    run.persist(&config.output_dir)?;
    println!("{}", serde_json::to_string_pretty(&run.report)?);
    println!("wrote {}", config.output_dir.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let mut failures = 0;
    for seed in 0..a.seeds {
        for (name, report) in op_kind_suite(seed, 1e-5, 1e-4)? {
            if !report.passed() {
                failures += 1;
                println!("seed {seed} {name}: {:?} max rel error {:.3e}", report.status, report.max_rel_error);
            }
        }
    }
    println!("op kinds: {failures} failures over {} seeds", a.seeds);
    let desk;
    let small;
    let (lm, clf) = match &a.models {
        Some(dir) => {
            desk = DeskModels::load(dir)?;
            (&desk.generator, Some(&desk.internal))
        }
        None => {
            let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
            let vocab = Vocab::from_texts(words.iter().map(String::as_str))?;
            let config = LmConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                max_len: 16,
                ..LmConfig::desk(vocab.len())
            };
            small = TransformerLm::init(vocab, config, 0)?;
            (&small, None::<&AttributeClassifier>)
        }
    };
    let spec = match clf {
        Some(_) => EnergySpec::soft("positive"),
        None => EnergySpec::keywords_any(&["w3"]),
    };
    let objective = Objective::new(&spec, EnergyModels { judge: lm, classifier: clf })?;
    let prompt: Vec<usize> = vec![lm.vocab().len() - 1];
    let mut worst = 0f64;
    for seed in 0..a.seeds {
        let config = DecodeConfig {
            length: 4,
            seed,
            ..DecodeConfig::default()
        };
        let r = bias_grad_check(lm, &objective, &prompt, &config, 1e-5, 1e-4)?;
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failures += 1;
            println!("end-to-end seed {seed}: {:?}", r.status);
        }
    }
    println!("end-to-end energy: max rel error {worst:.3e} over {} seeds", a.seeds);
    if failures > 0 {
        bail!("{failures} gradient checks failed");
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    config.apply(&a.run.overrides())?;
    let models = config.load_models()?;
    let lambdas = if a.lambdas.is_empty() { LAMBDA_GRID.to_vec() } else { a.lambdas };
    let table = lambda_sweep(&config, models.view(), &lambdas)?;
    table.persist(&config.output_dir)?;
    print!("{}", table.render());
    Ok(())
}
