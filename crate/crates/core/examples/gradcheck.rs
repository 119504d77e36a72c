//! Checks tape gradients against central finite differences: every op kind on
//! random inputs, then the end-to-end energy with respect to the logit biases
//! through a softmax-relaxed rollout of a small random model.
//!
//! cargo run --release --example gradcheck -- [seeds]

use bolt::autodiff::op_kind_suite;
use bolt::decoder::{bias_grad_check, DecodeConfig};
use bolt::discriminator::{AttributeClassifier, ClassifierConfig};
use bolt::energy::{EnergyModels, EnergySpec, Objective};
use bolt::lm::{LmConfig, TransformerLm, Vocab};

fn main() -> anyhow::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        for (op, r) in op_kind_suite(seed, 1e-5, 1e-4)? {
            worst = worst.max(r.max_rel_error);
            if !r.passed() {
                println!("seed {seed} {op}: {:?} max rel error {:.2e}", r.status, r.max_rel_error);
            }
        }
    }
    println!("op kinds over {seeds} seeds: max rel error {worst:.2e}");

    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_texts(words.iter().map(String::as_str))?;
    let config = LmConfig {
        d_model: 16,
        ..LmConfig::desk(vocab.len())
    };
    for seed in 0..seeds {
        let lm = TransformerLm::init(vocab.clone(), config.clone(), seed)?;
        let clf = AttributeClassifier::init(
            vocab.clone(),
            vec!["negative".into(), "positive".into()],
            ClassifierConfig::default(),
            seed,
        )?;
        let models = EnergyModels {
            judge: &lm,
            classifier: Some(&clf),
        };
        let specs = [EnergySpec::soft("positive"), EnergySpec::keywords_all(&["w3", "w7"])];
        for spec in &specs {
            let objective = Objective::new(spec, models)?;
            let decode = DecodeConfig {
                length: 4,
                seed,
                ..DecodeConfig::default()
            };
            let r = bias_grad_check(&lm, &objective, &[5, 6], &decode, 1e-5, 1e-4)?;
            println!(
                "seed {seed} {:?}: {:?} max rel error {:.2e}",
                spec.constraint, r.status, r.max_rel_error
            );
        }
    }
    Ok(())
}
