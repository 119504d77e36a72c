//! Attribute classifier over one-hot token sequences.
//!
//! The encoder multiplies the one-hot rows into an embedding table, mean-pools
//! over positions and applies a one-hidden-layer GELU MLP. Because the input is
//! consumed by a matrix product, `p(c | y)` is differentiable in the one-hots
//! and a straight-through rollout can be steered by it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lm::{split_indices, Vocab};

pub const CHECKPOINT_KIND: &str = "classifier";

/// `(text, label)` pairs. The label set is the sorted set of labels present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledCorpus {
    pairs: Vec<(String, String)>,
}

impl LabeledCorpus {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        for (text, label) in &pairs {
            if label.trim().is_empty() || label.contains(['\t', '\n']) || text.contains(['\t', '\n']) {
                return Err(Error::invalid(format!("malformed pair ({text:?}, {label:?})")));
            }
        }
        Ok(LabeledCorpus { pairs })
    }

    /// Parses `text<TAB>label` lines. Blank lines are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (t, l) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Config(format!("corpus line {}: expected `text<TAB>label`", n + 1)))?;
            pairs.push((t.trim().to_string(), l.trim().to_string()));
        }
        Self::new(pairs)
    }

    pub fn to_tsv(&self) -> String {
        self.pairs.iter().map(|(t, l)| format!("{t}\t{l}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.pairs
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Seeded split into two disjoint corpora, the first holding `fraction`
    /// of the pairs.
    pub fn split(&self, fraction: f64, seed: u64) -> (LabeledCorpus, LabeledCorpus) {
        let (rest, first) = split_indices(self.len(), fraction, seed);
        let pick = |idx: &[usize]| LabeledCorpus {
            pairs: idx.iter().map(|&i| self.pairs[i].clone()).collect(),
        };
        (pick(&first), pick(&rest))
    }

    /// Same texts with the labels permuted by a seeded shuffle.
    pub fn shuffled_labels(&self, seed: u64) -> LabeledCorpus {
        let mut labels: Vec<String> = self.pairs.iter().map(|(_, l)| l.clone()).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        LabeledCorpus {
            pairs: self.pairs.iter().zip(labels).map(|((t, _), l)| (t.clone(), l)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub d_model: usize,
    pub hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { d_model: 16, hidden: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout: f64,
    /// Decoupled weight decay; keeps the output probabilities away from 0 and 1.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 10,
            lr: 1e-2,
            batch_size: 16,
            seed: 0,
            holdout: 0.1,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_loss: Vec<f64>,
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
    pub unknown_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    vocab: Vocab,
    classes: Vec<String>,
    config: ClassifierConfig,
    // embedding V x d, w1 d x h, b1 1 x h, w2 h x C, b2 1 x C
    params: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BoundClassifier {
    vars: Vec<Var>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    classes: Vec<String>,
    vocab: Vocab,
}

const PARAM_NAMES: [&str; 5] = ["embedding", "mlp.w1", "mlp.b1", "head.w", "head.b"];

impl AttributeClassifier {
    pub fn init(vocab: Vocab, classes: Vec<String>, config: ClassifierConfig, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid(format!("need at least two classes, got {classes:?}")));
        }
        if config.d_model == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("degenerate classifier config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, h, c) = (vocab.len(), config.d_model, config.hidden, classes.len());
        let params = vec![
            Tensor::randn(&[v, d], 0.1, &mut rng),
            Tensor::randn(&[d, h], (1.0 / d as f64).sqrt(), &mut rng),
            Tensor::zeros(&[1, h]),
            Tensor::randn(&[h, c], (1.0 / h as f64).sqrt(), &mut rng),
            Tensor::zeros(&[1, c]),
        ];
        Ok(AttributeClassifier {
            vocab,
            classes,
            config,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn class_index(&self, class: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundClassifier {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
            .collect();
        BoundClassifier { vars }
    }

    /// Class logits `1 x C` for one-hot rows `n x V`.
    pub fn logits(&self, tape: &mut Tape, bound: &BoundClassifier, one_hots: Var) -> Result<Var> {
        let (n, v) = tape.dims(one_hots);
        if v != self.vocab.len() {
            return Err(Error::Shape {
                op: "classifier",
                lhs: vec![n, v],
                rhs: vec![self.vocab.len(), self.config.d_model],
            });
        }
        if n == 0 {
            return Err(Error::invalid("cannot classify an empty sequence"));
        }
        let b = &bound.vars;
        let e = tape.embed(one_hots, b[0])?;
        let pooled = tape.sum_cols(e);
        let pooled = tape.scale(pooled, 1.0 / n as f64);
        let hid = tape.matmul(pooled, b[1])?;
        let hid = tape.add(hid, b[2])?;
        let hid = tape.gelu(hid);
        let out = tape.matmul(hid, b[3])?;
        tape.add(out, b[4])
    }

    /// Class probabilities `1 x C`.
    pub fn probs(&self, tape: &mut Tape, bound: &BoundClassifier, one_hots: Var) -> Result<Var> {
        let z = self.logits(tape, bound, one_hots)?;
        Ok(tape.softmax(z))
    }

    /// `p(class | sequence)` as a `[1, 1]` tape node, differentiable in the one-hots.
    pub fn p_attribute(&self, tape: &mut Tape, bound: &BoundClassifier, one_hots: Var, class: &str) -> Result<Var> {
        let c = self.class_index(class)?;
        let p = self.probs(tape, bound, one_hots)?;
        tape.slice_cols(p, c, c + 1)
    }

    /// Class probabilities for a token-id sequence.
    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.vocab.check_ids(ids)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let oh = tape.constant(&Tensor::one_hot_rows(ids, self.vocab.len()));
        let p = self.probs(&mut tape, &b, oh)?;
        Ok(tape.value(p).to_vec())
    }

    /// Probability of `class` for whitespace-tokenised `text`.
    pub fn score(&self, text: &str, class: &str) -> Result<f64> {
        let c = self.class_index(class)?;
        Ok(self.predict_ids(&self.vocab.tokenize(text).ids)?[c])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ClassifierMeta {
            config: self.config.clone(),
            classes: self.classes.clone(),
            vocab: self.vocab.clone(),
        };
        let tensors: Vec<_> = PARAM_NAMES.iter().map(|n| n.to_string()).zip(&self.params).collect();
        checkpoint::encode(CHECKPOINT_KIND, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode::<ClassifierMeta>(bytes, CHECKPOINT_KIND)?;
        let m = ck.meta;
        let template = Self::init(m.vocab, m.classes, m.config, 0)?;
        if ck.tensors.len() != template.params.len()
            || ck.tensors.iter().zip(&template.params).any(|((_, a), b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("classifier tensor shapes do not match the header".into()));
        }
        Ok(AttributeClassifier {
            params: ck.tensors.into_iter().map(|(_, t)| t).collect(),
            ..template
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Fraction of `(ids, class)` examples whose most probable class is correct.
fn accuracy(clf: &AttributeClassifier, examples: &[(Vec<usize>, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (ids, y) in examples {
        let p = clf.predict_ids(ids)?;
        correct += (crate::autodiff::argmax(&p) == *y) as usize;
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

/// Trains a classifier over `vocab`. The class set is the corpus label set.
pub fn train_classifier(
    corpus: &LabeledCorpus,
    vocab: Vocab,
    config: ClassifierConfig,
    train: &ClassifierTrainConfig,
) -> Result<(AttributeClassifier, ClassifierReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("classifier corpus is empty"));
    }
    let classes = corpus.labels();
    if classes.len() < 2 {
        return Err(Error::invalid(format!("classifier corpus has a single class {classes:?}")));
    }
    let mut report = ClassifierReport::default();
    let mut examples = Vec::new();
    for (text, label) in corpus.pairs() {
        let t = vocab.tokenize(text);
        report.unknown_tokens += t.unknown;
        if !t.ids.is_empty() {
            let y = classes.iter().position(|c| c == label).expect("label drawn from corpus");
            examples.push((t.ids, y));
        }
    }
    let mut clf = AttributeClassifier::init(vocab, classes, config, train.seed)?;
    let (train_idx, held_idx) = split_indices(examples.len(), train.holdout, train.seed);
    let held: Vec<_> = held_idx.iter().map(|&i| examples[i].clone()).collect();
    let v = clf.vocab.len();
    let mut optims: Vec<Adam> = clf.params.iter().map(|p| Adam::new(p.len(), train.lr)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));

    for epoch in 0..train.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = clf.bind(&mut tape, true);
            let mut loss: Option<Var> = None;
            for &i in chunk {
                let (ids, y) = &examples[i];
                let oh = tape.constant(&Tensor::one_hot_rows(ids, v));
                let z = clf.logits(&mut tape, &bound, oh)?;
                let ce = tape.cross_entropy(z, &[*y])?;
                let ce = tape.scale(ce, 1.0 / chunk.len() as f64);
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, ce)?,
                    None => ce,
                });
            }
            let loss = loss.expect("non-empty batch");
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            for ((p, &var), opt) in clf.params.iter_mut().zip(&bound.vars).zip(&mut optims) {
                let g = grads.wrt(var, p.len());
                opt.update(p.data_mut(), &g);
                if train.weight_decay > 0.0 {
                    let keep = 1.0 - train.lr * train.weight_decay;
                    p.data_mut().iter_mut().for_each(|x| *x *= keep);
                }
            }
        }
        report.epoch_loss.push(total / train_idx.len().max(1) as f64);
    }
    report.heldout_accuracy = accuracy(&clf, &held)?;
    report.heldout_size = held.len();
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::corpus::{SyntheticWorld, NEGATIVE, POSITIVE};

    fn sentiment_corpus(n: usize, seed: u64) -> (LabeledCorpus, Vocab) {
        let world = SyntheticWorld::default();
        let pairs = world
            .labeled_lines(n, seed)
            .into_iter()
            .map(|(t, p)| (t, p.label().to_string()))
            .collect();
        (LabeledCorpus::new(pairs).unwrap(), world.vocab().unwrap())
    }

    fn trained(seed: u64) -> (AttributeClassifier, ClassifierReport) {
        let (corpus, vocab) = sentiment_corpus(1500, 7);
        let cfg = ClassifierTrainConfig {
            seed,
            holdout: 0.2,
            ..Default::default()
        };
        train_classifier(&corpus, vocab, ClassifierConfig::default(), &cfg).unwrap()
    }

    #[test]
    fn separable_corpus_is_learned_and_stable_across_seeds() {
        let (clf, a) = trained(1);
        let (_, b) = trained(2);
        assert!(a.heldout_accuracy >= 0.97, "{:?}", a);
        assert!(b.heldout_accuracy >= 0.97, "{}", b.heldout_accuracy);
        assert!((a.heldout_accuracy - b.heldout_accuracy).abs() <= 0.02);
        assert!(clf.score("The movie was good .", POSITIVE).unwrap() > 0.9);
        assert!(clf.score("The movie was awful .", NEGATIVE).unwrap() > 0.9);
        assert_eq!(clf.classes(), [NEGATIVE, POSITIVE]);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let (corpus, vocab) = sentiment_corpus(2000, 8);
        let cfg = ClassifierTrainConfig {
            holdout: 0.25,
            ..Default::default()
        };
        let (_, r) = train_classifier(&corpus.shuffled_labels(3), vocab, ClassifierConfig::default(), &cfg).unwrap();
        assert!((r.heldout_accuracy - 0.5).abs() <= 0.1, "{}", r.heldout_accuracy);
    }

    #[test]
    fn degenerate_corpora_are_rejected() {
        let (_, vocab) = sentiment_corpus(1, 0);
        let cfg = ClassifierTrainConfig::default();
        let empty = LabeledCorpus::default();
        assert!(train_classifier(&empty, vocab.clone(), ClassifierConfig::default(), &cfg).is_err());
        let single = LabeledCorpus::new(vec![("The book was good .".into(), POSITIVE.into())]).unwrap();
        assert!(train_classifier(&single, vocab, ClassifierConfig::default(), &cfg).is_err());
    }

    fn random_clf(seed: u64) -> AttributeClassifier {
        let (_, vocab) = sentiment_corpus(1, 0);
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        AttributeClassifier::init(vocab, classes, ClassifierConfig { d_model: 6, hidden: 5 }, seed).unwrap()
    }

    #[test]
    fn probabilities_form_a_simplex() {
        for seed in 0..10 {
            let clf = random_clf(seed);
            let ids: Vec<usize> = (0..7).map(|i| 4 + (i * 31 + seed as usize * 7) % 200).collect();
            let p = clf.predict_ids(&ids).unwrap();
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_class_and_foreign_ids_are_rejected() {
        let clf = random_clf(0);
        let mut t = Tape::new();
        let b = clf.bind(&mut t, false);
        let oh = t.constant(&Tensor::one_hot_rows(&[5, 6], clf.vocab().len()));
        assert!(matches!(clf.p_attribute(&mut t, &b, oh, "zzz"), Err(Error::UnknownClass(_))));
        assert!(clf.predict_ids(&[clf.vocab().len()]).is_err());
        let wide = t.constant(&Tensor::zeros(&[2, clf.vocab().len() + 1]));
        assert!(clf.logits(&mut t, &b, wide).is_err());
    }

    #[test]
    fn gradient_wrt_relaxed_input_matches_fd() {
        for seed in 0..3 {
            let clf = random_clf(seed);
            let v = clf.vocab().len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut relaxed = Tensor::randn(&[4, v], 1.0, &mut rng);
            for r in 0..4 {
                let row = &mut relaxed.data_mut()[r * v..(r + 1) * v];
                crate::autodiff::softmax_in_place(row);
            }
            let rep = grad_check(
                |t, x| {
                    let b = clf.bind(t, false);
                    let p = clf.p_attribute(t, &b, x, "b")?;
                    Ok(t.sum(p))
                },
                &relaxed,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "{:?} {}", rep.status, rep.max_rel_error);
        }
    }

    #[test]
    fn checkpoint_and_tsv_round_trip() {
        let clf = random_clf(4);
        let back = AttributeClassifier::from_bytes(&clf.to_bytes().unwrap()).unwrap();
        assert_eq!(back.predict_ids(&[9, 10]).unwrap(), clf.predict_ids(&[9, 10]).unwrap());
        assert!(crate::lm::TransformerLm::from_bytes(&clf.to_bytes().unwrap()).is_err());

        let (corpus, _) = sentiment_corpus(20, 1);
        assert_eq!(LabeledCorpus::parse_tsv(&corpus.to_tsv()).unwrap(), corpus);
        assert!(LabeledCorpus::parse_tsv("no tab here").is_err());
        let (a, b) = corpus.split(0.5, 0);
        assert_eq!(a.len() + b.len(), 20);
        assert!(a.pairs().iter().all(|p| !b.pairs().contains(p) || corpus.pairs().iter().filter(|q| *q == p).count() > 1));
    }
}
