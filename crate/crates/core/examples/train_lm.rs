//! Trains a desk-scale language model on the synthetic corpus and prints a few
//! greedy continuations.
//!
//! cargo run --release --example train_lm -- [lines] [epochs]

use std::time::Instant;

use bolt::corpus::SyntheticWorld;
use bolt::lm::{greedy_decode, train_lm, LmConfig, LogitPolicy, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let lines: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);

    let world = SyntheticWorld::default();
    let vocab = world.vocab()?;
    let corpus = world.lm_corpus(lines, 0);
    let config = LmConfig::desk(vocab.len());
    let train = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (lm, report) = train_lm(&corpus, vocab, config, &train)?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    for (e, l) in report.epoch_loss.iter().enumerate() {
        println!("epoch {e}: train loss {l:.3}");
    }
    println!(
        "held-out ppl {:.2} -> {:.2}",
        report.heldout_ppl_before(),
        report.heldout_ppl_after()
    );

    for prompt in world.prompts.iter().take(5) {
        let ids = lm.vocab().encode_strict(prompt)?;
        let out = greedy_decode(&lm, &ids, 20, &LogitPolicy::default())?;
        println!("{prompt} | {}", lm.vocab().detokenize(&out));
    }
    Ok(())
}
