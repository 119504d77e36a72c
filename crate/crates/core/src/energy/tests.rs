use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, softmax_in_place};
use crate::discriminator::ClassifierConfig;
use crate::lm::{LmConfig, Vocab};

const N_WORDS: usize = 12;

fn vocab() -> Vocab {
    let words: Vec<String> = (0..N_WORDS).map(|i| format!("w{i:02}")).collect();
    Vocab::from_texts(words.iter().map(String::as_str)).unwrap()
}

fn lm_config(v: usize) -> LmConfig {
    LmConfig {
        vocab_size: v,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 24,
        dropout: 0.0,
    }
}

fn random_lm(seed: u64) -> TransformerLm {
    let v = vocab();
    let n = v.len();
    let mut lm = TransformerLm::init(v, lm_config(n), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    for p in lm.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
    }
    lm
}

fn random_clf(seed: u64) -> AttributeClassifier {
    let classes = vec!["neg".to_string(), "pos".to_string()];
    AttributeClassifier::init(vocab(), classes, ClassifierConfig { d_model: 6, hidden: 5 }, seed).unwrap()
}

/// Judge whose final hidden state is constant, so its next-token distribution
/// is the same at every position and fully set by the head.
fn constant_judge(head_row: impl Fn(usize) -> f64) -> TransformerLm {
    let v = vocab();
    let n = v.len();
    let mut lm = TransformerLm::init(v, lm_config(n), 0).unwrap();
    let k = lm.params().len();
    let d = 8;
    lm.params_mut()[k - 3] = Tensor::zeros(&[d]);
    let mut beta = vec![0.0; d];
    beta[0] = 1.0;
    lm.params_mut()[k - 2] = Tensor::new(vec![d], beta).unwrap();
    let mut head = vec![0.0; d * n];
    for c in 0..n {
        head[c] = head_row(c);
    }
    lm.params_mut()[k - 1] = Tensor::new(vec![d, n], head).unwrap();
    lm
}

fn relaxed(rows: usize, v: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::randn(&[rows, v], 1.5, &mut rng);
    for r in 0..rows {
        softmax_in_place(&mut t.data_mut()[r * v..(r + 1) * v]);
    }
    t
}

fn eval(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, ids: &[usize], v: usize) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::one_hot_rows(ids, v));
    let out = f(&mut t, x).unwrap();
    t.scalar(out)
}

/// Fraction of keywords occurring at least once, by direct search.
fn presence_oracle(ids: &[usize], keywords: &[usize]) -> f64 {
    keywords.iter().filter(|k| ids.contains(k)).count() as f64 / keywords.len() as f64
}

#[test]
fn diff_bleu_examples() {
    let v = vocab().len();
    let b = |ids: &[usize], kw: &[usize]| eval(|t, x| diff_bleu(t, x, kw), ids, v);
    assert_eq!(b(&[4, 5, 6], &[5, 9]), 0.5);
    assert_eq!(b(&[4, 5, 6], &[8, 9]), 0.0);
    assert_eq!(b(&[9, 9, 9, 5, 5], &[5, 9]), 1.0);
    let e = |ids: &[usize]| eval(|t, x| e_hard(t, x, &[5, 9]), ids, v);
    assert_eq!(e(&[5, 9]), -1.0);
    assert_eq!(e(&[4]), 0.0);
}

#[test]
fn diff_bleu_matches_presence_oracle_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = vocab().len();
    for _ in 0..1000 {
        let ids: Vec<usize> = (0..rng.random_range(1..15)).map(|_| rng.random_range(4..v)).collect();
        let kw: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(4..v)).collect();
        let got = eval(|t, x| diff_bleu(t, x, &kw), &ids, v);
        assert!((got - presence_oracle(&ids, &kw)).abs() < 1e-12);
    }
}

#[test]
fn adding_a_missing_keyword_strictly_lowers_e_hard() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = vocab().len();
    for _ in 0..200 {
        let kw: Vec<usize> = vec![rng.random_range(4..v), rng.random_range(4..v), rng.random_range(4..v)];
        let mut ids: Vec<usize> = (0..6).map(|_| rng.random_range(4..v)).collect();
        let Some(&missing) = kw.iter().find(|k| !ids.contains(k)) else {
            continue;
        };
        let before = eval(|t, x| e_hard(t, x, &kw), &ids, v);
        let pos = rng.random_range(0..ids.len());
        if kw.contains(&ids[pos]) && ids.iter().filter(|&&i| i == ids[pos]).count() == 1 {
            ids.push(missing);
        } else {
            ids[pos] = missing;
        }
        let after = eval(|t, x| e_hard(t, x, &kw), &ids, v);
        assert!(after < before, "{before} -> {after}");
    }
}

#[test]
fn diff_bleu_gradient_matches_fd_on_relaxed_input() {
    let v = vocab().len();
    for seed in 0..5 {
        // low mass per keyword keeps every clip inactive
        let x = relaxed(3, v, seed);
        let r = grad_check(|t, x| diff_bleu(t, x, &[5, 7]), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.status);
    }
    // saturated keyword: no gradient on its column
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::one_hot_rows(&[5, 5, 6], v));
    let b = diff_bleu(&mut t, x, &[5, 7]).unwrap();
    let g = t.backward(b).unwrap().wrt(x, 3 * v);
    assert_eq!(g[5], 0.0);
    assert_eq!(g[7], 0.5);
}

#[test]
fn e_soft_is_the_negated_probability_and_binary_pair_sums_to_minus_one() {
    let clf = random_clf(3);
    let v = clf.vocab().len();
    let ids = [4, 8, 9, 11];
    let probs = clf.predict_ids(&ids).unwrap();
    let es = |class: &str| {
        eval(
            |t, x| {
                let b = clf.bind(t, false);
                e_soft(t, &clf, &b, x, class)
            },
            &ids,
            v,
        )
    };
    assert_eq!(es("pos"), -probs[1]);
    assert!((es("pos") + es("neg") + 1.0).abs() < 1e-12);
    assert!((-1.0..=0.0).contains(&es("pos")));
}

#[test]
fn fluency_of_a_uniform_judge_is_l_over_v() {
    let judge = constant_judge(|_| 0.0);
    let v = judge.vocab().len();
    assert_eq!(v, 16);
    let e = eval(
        |t, x| {
            let b = judge.bind(t, false);
            e_fluent(t, &judge, &b, &[4, 5], x, FluencyForm::Probability)
        },
        &[6, 7, 8, 9],
        v,
    );
    assert!((e + 0.25).abs() < 1e-12, "{e}");
}

#[test]
fn fluency_of_a_certain_judge_is_minus_l() {
    let judge = constant_judge(|c| if c == 9 { 1000.0 } else { 0.0 });
    let v = judge.vocab().len();
    let e = eval(
        |t, x| {
            let b = judge.bind(t, false);
            e_fluent(t, &judge, &b, &[4], x, FluencyForm::Probability)
        },
        &[9, 9, 9, 9, 9],
        v,
    );
    assert!((e + 5.0).abs() < 1e-9, "{e}");
}

#[test]
fn fluency_matches_sum_of_probabilities_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let judge = random_lm(seed);
        let v = judge.vocab().len();
        let prompt: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(4..v)).collect();
        let gen: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(4..v)).collect();
        let full: Vec<usize> = prompt.iter().chain(&gen).copied().collect();
        let lp = judge.token_log_probs(&full).unwrap();
        let oracle_p: f64 = -lp[prompt.len()..].iter().map(|x| x.exp()).sum::<f64>();
        let oracle_log: f64 = -lp[prompt.len()..].iter().sum::<f64>();
        for (form, oracle) in [(FluencyForm::Probability, oracle_p), (FluencyForm::LogProbability, oracle_log)] {
            let e = eval(
                |t, x| {
                    let b = judge.bind(t, false);
                    e_fluent(t, &judge, &b, &prompt, x, form)
                },
                &gen,
                v,
            );
            assert!((e - oracle).abs() < 1e-9, "{form:?}: {e} vs {oracle}");
        }
        assert!(oracle_p <= 0.0 && oracle_p >= -(gen.len() as f64));
    }
}

#[test]
fn fluency_gradient_matches_fd_on_relaxed_input() {
    for seed in 0..3 {
        let judge = random_lm(seed);
        let v = judge.vocab().len();
        let x = relaxed(4, v, seed + 10);
        let r = grad_check(
            |t, x| {
                let b = judge.bind(t, false);
                e_fluent(t, &judge, &b, &[4, 6], x, FluencyForm::Probability)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{:?} {}", r.status, r.max_rel_error);
    }
}

fn parts(obj: &Objective<'_>, prompt: &[usize], ids: &[usize]) -> (f64, f64, f64) {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::one_hot_rows(ids, obj.vocab_size()));
    let e = obj.energy(&mut t, prompt, x).unwrap();
    (t.scalar(e.total), t.scalar(e.constraint), t.scalar(e.fluency))
}

#[test]
fn total_energy_is_the_weighted_sum_of_components() {
    let judge = random_lm(5);
    let clf = random_clf(5);
    let models = EnergyModels {
        judge: &judge,
        classifier: Some(&clf),
    };
    let prompt = [4, 5];
    let ids = [6, 9, 9, 12];
    let full: Vec<usize> = prompt.iter().chain(&ids).copied().collect();
    let p_pos = clf.predict_ids(&full).unwrap()[1];
    let lp = judge.token_log_probs(&full).unwrap();
    let fl: f64 = -lp[2..].iter().map(|x| x.exp()).sum::<f64>();

    let obj = Objective::new(&EnergySpec::soft("pos").with_lambda(0.0), models).unwrap();
    let (total, c, _) = parts(&obj, &prompt, &ids);
    assert_eq!(total, c);
    assert_eq!(total, -p_pos);

    let obj = Objective::new(&EnergySpec::soft("pos").with_lambda(0.1), models).unwrap();
    let (total, c, f) = parts(&obj, &prompt, &ids);
    assert!((total - (-p_pos + 0.1 * fl)).abs() < 1e-12);
    assert!((c + p_pos).abs() < 1e-12 && (f - fl).abs() < 1e-12);

    let kw = ["w05", "w00"];
    let obj = Objective::new(&EnergySpec::keywords_all(&kw).with_lambda(0.7), models).unwrap();
    let (total, c, _) = parts(&obj, &prompt, &ids);
    assert_eq!(c, -0.5);
    assert!((total - (-0.5 + 0.7 * fl)).abs() < 1e-12);
    assert!(total >= -1.0 - 0.7 * ids.len() as f64 && total <= 0.0);
}

#[test]
fn stop_rules() {
    let judge = random_lm(6);
    let clf = random_clf(6);
    let models = EnergyModels {
        judge: &judge,
        classifier: Some(&clf),
    };
    let v = judge.vocab();
    let (a, b, c) = (v.id("w01").unwrap(), v.id("w02").unwrap(), v.id("w03").unwrap());
    let any = Objective::new(&EnergySpec::keywords_any(&["w01", "w02"]), models).unwrap();
    let all = Objective::new(&EnergySpec::keywords_all(&["w01", "w02"]), models).unwrap();
    assert!(any.satisfied(&[], &[c, a]).unwrap());
    assert!(!all.satisfied(&[], &[c, a]).unwrap());
    assert!(all.satisfied(&[], &[b, c, a]).unwrap());
    // keywords in the prompt do not count
    assert!(!any.satisfied(&[a], &[c]).unwrap());

    let p_neg = clf.predict_ids(&[a, c]).unwrap()[0];
    let below = |th: f64| {
        let mut s = EnergySpec::avoid("pos", "neg");
        s.stop = StopRule::AttributeBelow {
            class: "neg".into(),
            threshold: th,
        };
        Objective::new(&s, models).unwrap().satisfied(&[a], &[c]).unwrap()
    };
    assert!(below(p_neg + 1e-6));
    assert!(!below(p_neg));
    assert!(!Objective::new(&EnergySpec::soft("pos"), models).unwrap().satisfied(&[], &[a]).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    let judge = random_lm(7);
    let clf = random_clf(7);
    let with = EnergyModels {
        judge: &judge,
        classifier: Some(&clf),
    };
    let without = EnergyModels {
        judge: &judge,
        classifier: None,
    };
    assert!(Objective::new(&EnergySpec::keywords_any(&["nope"]), with).is_err());
    assert!(Objective::new(&EnergySpec::keywords_any(&["<eos>"]), with).is_err());
    assert!(Objective::new(&EnergySpec::keywords_any(&[]), with).is_err());
    assert!(Objective::new(&EnergySpec::keywords_any(&["w01"]).with_lambda(-0.1), with).is_err());
    assert!(Objective::new(&EnergySpec::soft("pos"), without).is_err());
    assert!(Objective::new(&EnergySpec::soft("maybe"), with).is_err());
    assert!(Objective::new(&EnergySpec::keywords_any(&["w01"]), without).is_ok());
}

#[test]
fn spec_round_trips_through_json() {
    for spec in [
        EnergySpec::avoid("positive", "negative"),
        EnergySpec::keywords_all(&["a", "b"]).with_lambda(0.3),
    ] {
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<EnergySpec>(&json).unwrap(), spec);
    }
}
