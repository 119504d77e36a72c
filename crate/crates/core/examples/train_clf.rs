//! Trains an attribute classifier from a `text<TAB>label` corpus, then repeats
//! the run with shuffled labels as a chance-level control.
//!
//! cargo run --release --example train_clf -- [corpus.tsv]
//!
//! Without a corpus path a labelled sentiment corpus is sampled from the
//! synthetic world.

use bolt::corpus::SyntheticWorld;
use bolt::discriminator::{train_classifier, ClassifierConfig, ClassifierTrainConfig, LabeledCorpus};

fn main() -> anyhow::Result<()> {
    let world = SyntheticWorld::default();
    let corpus = match std::env::args().nth(1) {
        Some(path) => LabeledCorpus::load(path.as_ref())?,
        None => LabeledCorpus::new(
            world
                .labeled_lines(1000, 0)
                .into_iter()
                .map(|(text, p)| (text, p.label().to_string()))
                .collect(),
        )?,
    };
    let vocab = world.vocab()?;
    let train = ClassifierTrainConfig {
        weight_decay: 1.0,
        ..ClassifierTrainConfig::default()
    };
    let (clf, report) = train_classifier(&corpus, vocab.clone(), ClassifierConfig::default(), &train)?;
    println!("classes {:?}", clf.classes());
    println!("held-out accuracy {:.3} on {} lines", report.heldout_accuracy, report.heldout_size);
    println!("tokens outside the vocabulary: {}", report.unknown_tokens);

    let (_, control) = train_classifier(&corpus.shuffled_labels(1), vocab, ClassifierConfig::default(), &train)?;
    println!("shuffled-label control accuracy {:.3}", control.heldout_accuracy);

    for text in ["The movie was rather wonderful .", "The movie was rather awful ."] {
        let p = clf.score(text, "positive")?;
        println!("p(positive) = {p:.3}  {text}");
    }
    Ok(())
}
