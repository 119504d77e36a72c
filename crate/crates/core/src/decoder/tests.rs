use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{argmax, Tensor};
use crate::energy::{Energy, EnergyModels, EnergySpec, EnergyVars, Objective, StopRule};
use crate::lm::{greedy_decode, LmConfig, LogitPolicy, TransformerLm, Vocab};

fn random_lm(seed: u64) -> TransformerLm {
    random_lm_scaled(seed, 0.6)
}

fn random_lm_scaled(seed: u64, amp: f64) -> TransformerLm {
    let words: Vec<String> = (0..16).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocab::from_texts(words.iter().map(String::as_str)).unwrap();
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 32,
        dropout: 0.0,
    };
    let mut lm = TransformerLm::init(vocab, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    for p in lm.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-amp..amp));
    }
    lm
}

fn keyword_objective<'a>(lm: &'a TransformerLm, kw: &[&str]) -> Objective<'a> {
    let models = EnergyModels {
        judge: lm,
        classifier: None,
    };
    Objective::new(&EnergySpec::keywords_any(kw), models).unwrap()
}

/// Keyword absent from the greedy continuation.
fn missing_keyword(lm: &TransformerLm, prompt: &[usize], len: usize) -> String {
    let greedy = greedy_decode(lm, prompt, len, &LogitPolicy::default()).unwrap();
    let id = (4..lm.vocab().len()).rev().find(|i| !greedy.contains(i)).unwrap();
    lm.vocab().token(id).unwrap().to_string()
}

#[test]
fn schedule_values() {
    use ScheduleKind::*;
    assert_eq!(weight_schedule(Decreasing, 0, 10).unwrap(), 1.0);
    assert_eq!(weight_schedule(Decreasing, 10, 10).unwrap(), 0.0);
    assert_eq!(weight_schedule(Decreasing, 25, 50).unwrap(), 0.5);
    assert_eq!(weight_schedule(Increasing, 5, 20).unwrap(), 0.25);
    assert_eq!(weight_schedule(Constant, 7, 9).unwrap(), 1.0);
    assert_eq!(weight_schedule(Learned, 3, 9).unwrap(), 1.0);
    assert!(weight_schedule(Decreasing, 11, 10).is_err());
    assert!(weight_schedule(Decreasing, 0, 0).is_err());
    for l in 1..40 {
        for kind in [Decreasing, Increasing, Constant] {
            for t in 0..=l {
                assert!((0.0..=1.0).contains(&weight_schedule(kind, t, l).unwrap()));
            }
        }
        for t in 1..=l {
            assert!(weight_schedule(Decreasing, t, l).unwrap() < weight_schedule(Decreasing, t - 1, l).unwrap());
        }
    }
    for k in ScheduleKind::ALL {
        assert_eq!(ScheduleKind::parse(k.name()).unwrap(), k);
    }
    assert!(ScheduleKind::parse("cubic").is_err());
}

#[test]
fn adjust_logits_examples() {
    let mut t = Tape::new();
    let y = t.constant(&Tensor::row(vec![1.0, 2.0]));
    let b = t.constant(&Tensor::row(vec![4.0, -2.0]));
    let z = t.constant(&Tensor::row(vec![0.0, 0.0]));
    let r = adjust_logits(&mut t, y, b, 0.5).unwrap();
    assert_eq!(t.value(r), [3.0, 1.0]);
    let r = adjust_logits(&mut t, y, z, 0.7).unwrap();
    assert_eq!(t.value(r), [1.0, 2.0]);
    let r = adjust_logits(&mut t, y, b, 0.0).unwrap();
    assert_eq!(t.value(r), [1.0, 2.0]);
    let w = t.constant(&Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let r = adjust_logits_learned(&mut t, y, b, w).unwrap();
    assert_eq!(t.value(r), [3.0, 1.0]);
    let short = t.constant(&Tensor::row(vec![1.0]));
    assert!(adjust_logits(&mut t, y, short, 1.0).is_err());
}

#[test]
fn zero_bias_rollout_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..6 {
        let lm = random_lm(seed);
        for _ in 0..4 {
            let prompt: Vec<usize> = (0..rng.random_range(0..5)).map(|_| rng.random_range(4..20)).collect();
            let len = rng.random_range(1..12);
            let greedy = greedy_decode(&lm, &prompt, len, &LogitPolicy::default()).unwrap();
            for kind in ScheduleKind::ALL {
                let bias = BiasState::zeros(len, 8, kind);
                let mut t = Tape::new();
                let cfg = DecodeConfig {
                    schedule: kind,
                    ..DecodeConfig::default()
                };
                let ro = rollout(&mut t, &lm, &bias, &prompt, &cfg, Relaxation::StraightThrough).unwrap();
                assert_eq!(ro.ids, greedy);
            }
        }
    }
}

#[test]
fn rollout_is_deterministic_and_follows_the_ste_path() {
    let lm = random_lm(1);
    let cfg = DecodeConfig {
        length: 9,
        seed: 4,
        init_std: 2.0,
        ..DecodeConfig::default()
    };
    let bias = BiasState::init(9, 8, &cfg);
    let run = || {
        let mut t = Tape::new();
        let ro = rollout(&mut t, &lm, &bias, &[5, 6], &cfg, Relaxation::StraightThrough).unwrap();
        let v = lm.config().vocab_size;
        for (r, (&id, &y)) in ro.ids.iter().zip(&ro.logits).enumerate() {
            assert_eq!(argmax(t.value(y)), id);
            let row = &t.value(ro.one_hots)[r * v..(r + 1) * v];
            assert_eq!(row, Tensor::one_hot(id, v).data());
        }
        ro.ids
    };
    let a = run();
    assert_eq!(a, run());
    let greedy = greedy_decode(&lm, &[5, 6], 9, &LogitPolicy::default()).unwrap();
    assert_ne!(a, greedy, "a large random bias should move at least one token");
}

#[test]
fn bias_logits_are_the_head_applied_to_h() {
    let lm = random_lm(2);
    let cfg = DecodeConfig {
        length: 6,
        seed: 1,
        ..DecodeConfig::default()
    };
    let bias = BiasState::init(6, 8, &cfg);
    let mut t = Tape::new();
    let ro = rollout(&mut t, &lm, &bias, &[4], &cfg, Relaxation::StraightThrough).unwrap();
    let head = lm.head();
    let v = lm.config().vocab_size;
    for (step, &yb) in ro.bias_logits.iter().enumerate() {
        let h = bias.h.row_slice(step);
        for c in 0..v {
            let expect: f64 = (0..8).map(|k| h[k] * head.get(k, c)).sum();
            assert!((t.value(yb)[c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn direct_feedback_gradient_is_the_head_applied_to_each_row() {
    // a linear energy sum_t <c_t, y_t> has gradient w_t * W_head c_t on h_t
    let lm = random_lm(6);
    let (l, d, v) = (7, 8, lm.config().vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = Tensor::randn(&[l, v], 1.0, &mut rng);
    let head = lm.head();
    for (schedule, feedback) in [
        (ScheduleKind::Decreasing, FeedbackGradient::Direct),
        (ScheduleKind::Increasing, FeedbackGradient::Direct),
        (ScheduleKind::Constant, FeedbackGradient::Full),
    ] {
        let cfg = DecodeConfig {
            length: l,
            schedule,
            feedback,
            seed: 2,
            ..DecodeConfig::default()
        };
        let bias = BiasState::init(l, d, &cfg);
        let mut t = Tape::new();
        let ro = rollout(&mut t, &lm, &bias, &[4, 6], &cfg, Relaxation::StraightThrough).unwrap();
        let cv = t.constant(&c);
        let e = t.mul(ro.one_hots, cv).unwrap();
        let e = t.sum(e);
        let g = t.backward(e).unwrap().wrt(ro.h, l * d);
        let rows: Vec<usize> = match feedback {
            FeedbackGradient::Direct => (0..l).collect(),
            FeedbackGradient::Full => vec![l - 1],
        };
        for step in rows {
            let w = weight_schedule(schedule, step, l).unwrap();
            for k in 0..d {
                let expect: f64 = w * (0..v).map(|j| head.get(k, j) * c.get(step, j)).sum::<f64>();
                assert!((g[step * d + k] - expect).abs() < 1e-10, "{feedback:?} step {step}");
            }
        }
    }
}

#[test]
fn energy_gradient_reaches_the_biases() {
    let lm = random_lm(3);
    let kw = missing_keyword(&lm, &[4, 5], 8);
    let obj = keyword_objective(&lm, &[&kw]);
    let cfg = DecodeConfig {
        length: 8,
        schedule: ScheduleKind::Learned,
        ..DecodeConfig::default()
    };
    let bias = BiasState::init(8, 8, &cfg);
    let mut t = Tape::new();
    let ro = rollout(&mut t, &lm, &bias, &[4, 5], &cfg, Relaxation::StraightThrough).unwrap();
    let e = obj.energy(&mut t, &[4, 5], ro.one_hots).unwrap();
    let g = t.backward(e.total).unwrap();
    assert!(g.wrt(ro.h, 64).iter().any(|&x| x != 0.0));
    assert!(g.wrt(ro.weights.unwrap(), 8).iter().any(|&x| x != 0.0));
}

#[test]
fn relaxed_rollout_energy_gradient_matches_fd() {
    for seed in 0..3 {
        let lm = random_lm(10 + seed);
        let obj = keyword_objective(&lm, &["w03", "w09"]);
        let cfg = DecodeConfig {
            length: 4,
            seed,
            ..DecodeConfig::default()
        };
        let r = bias_grad_check(&lm, &obj, &[6], &cfg, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{:?} {}", r.status, r.max_rel_error);
    }
}

#[test]
fn no_iterations_and_no_noise_is_greedy() {
    let lm = random_lm(4);
    let obj = keyword_objective(&lm, &["w00"]);
    let cfg = DecodeConfig {
        length: 10,
        max_iterations: 0,
        init_std: 0.0,
        ..DecodeConfig::default()
    };
    let g = bolt_generate(&lm, &obj, &[7, 8], &cfg).unwrap();
    assert_eq!(g.ids, greedy_decode(&lm, &[7, 8], 10, &LogitPolicy::default()).unwrap());
    assert_eq!(g.trace.records.len(), 1);
}

#[test]
fn keyword_search_stops_early_and_returns_the_keyword() {
    let mut hits = 0;
    for seed in 0..8 {
        let lm = random_lm_scaled(20 + seed, 0.2);
        let kw = missing_keyword(&lm, &[4], 10);
        let obj = keyword_objective(&lm, &[&kw]);
        let cfg = DecodeConfig {
            length: 10,
            max_iterations: 50,
            lr: 0.1,
            schedule: ScheduleKind::Constant,
            seed,
            ..DecodeConfig::default()
        };
        let g = bolt_generate(&lm, &obj, &[4], &cfg).unwrap();
        if g.text.split(' ').any(|w| w == kw) {
            hits += 1;
            assert!(g.trace.stopped_early);
            assert_eq!(g.trace.best, Some(g.trace.records.len() - 1));
        }
        check_min_selection(&g);
        assert!(g.trace.records.len() <= cfg.max_iterations + 1);
    }
    assert!(hits >= 7, "{hits}/8");
}

fn check_min_selection(g: &Generation) {
    let best = g.trace.best.unwrap();
    let min = g
        .trace
        .records
        .iter()
        .filter(|r| r.finite)
        .map(|r| r.total)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(g.energy(), Some(min));
    assert_eq!(g.ids, g.trace.records[best].ids);
    assert!(min <= g.trace.records[0].total);
}

#[test]
fn generation_is_deterministic() {
    let lm = random_lm(5);
    let obj = keyword_objective(&lm, &["w11"]);
    for schedule in ScheduleKind::ALL {
        let cfg = DecodeConfig {
            length: 8,
            max_iterations: 6,
            seed: 9,
            schedule,
            ..DecodeConfig::default()
        };
        let a = bolt_generate(&lm, &obj, &[4], &cfg).unwrap();
        let b = bolt_generate(&lm, &obj, &[4], &cfg).unwrap();
        assert_eq!(a, b);
        check_min_selection(&a);
    }
}

/// Wraps an objective and returns NaN on chosen evaluation indices.
struct Flaky<'a> {
    inner: Objective<'a>,
    calls: AtomicUsize,
    nan_on: Vec<usize>,
}

impl Energy for Flaky<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn energy(&self, tape: &mut Tape, prompt: &[usize], generated: Var) -> crate::Result<EnergyVars> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let mut e = self.inner.energy(tape, prompt, generated)?;
        if self.nan_on.contains(&n) {
            e.total = tape.scale(e.total, f64::NAN);
        }
        Ok(e)
    }

    fn satisfied(&self, prompt: &[usize], generated: &[usize]) -> crate::Result<bool> {
        self.inner.satisfied(prompt, generated)
    }
}

#[test]
fn non_finite_energy_rolls_back_and_continues() {
    let lm = random_lm(6);
    let cfg = DecodeConfig {
        length: 6,
        max_iterations: 5,
        ..DecodeConfig::default()
    };
    let spec = EnergySpec {
        stop: StopRule::Never,
        ..EnergySpec::keywords_any(&["w15"])
    };
    let models = EnergyModels {
        judge: &lm,
        classifier: None,
    };
    let flaky = Flaky {
        inner: Objective::new(&spec, models).unwrap(),
        calls: AtomicUsize::new(0),
        nan_on: vec![2],
    };
    let g = bolt_generate(&lm, &flaky, &[4], &cfg).unwrap();
    let bad: Vec<_> = g.trace.records.iter().filter(|r| !r.finite).collect();
    assert_eq!(bad.len(), 1);
    assert_eq!(g.trace.rollbacks, 1);
    assert_eq!(g.trace.records.len(), cfg.max_iterations + 1);
    // the rollout after the rollback repeats the pre-update state
    assert_eq!(g.trace.records[3].ids, g.trace.records[1].ids);
    assert_eq!(g.trace.records[3].total, g.trace.records[1].total);
    check_min_selection(&g);
}

#[test]
fn all_non_finite_is_a_failure_result() {
    let lm = random_lm(7);
    let flaky = Flaky {
        inner: keyword_objective(&lm, &["w15"]),
        calls: AtomicUsize::new(0),
        nan_on: (0..100).collect(),
    };
    let cfg = DecodeConfig {
        length: 4,
        max_iterations: 3,
        ..DecodeConfig::default()
    };
    let g = bolt_generate(&lm, &flaky, &[4], &cfg).unwrap();
    assert!(!g.succeeded());
    assert!(g.ids.is_empty());
    assert!(!g.trace.records.is_empty());
}

#[test]
fn invalid_configs_are_rejected() {
    let lm = random_lm(8);
    let obj = keyword_objective(&lm, &["w01"]);
    for cfg in [
        DecodeConfig {
            length: 0,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            lr: 0.0,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            repetition_penalty: 0.5,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            length: 40,
            ..DecodeConfig::default()
        },
    ] {
        assert!(bolt_generate(&lm, &obj, &[4], &cfg).is_err());
    }
}

#[test]
fn langevin_update_without_noise_is_a_gradient_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut z = vec![1.0, -2.0, 0.5];
    langevin_update(&mut z, &[0.5, 1.0, -2.0], 0.1, 0.0, &mut rng);
    assert_eq!(z, vec![1.0 - 0.05, -2.0 - 0.1, 0.5 + 0.2]);
    let mut a = vec![0.0; 1000];
    langevin_update(&mut a, &vec![0.0; 1000], 0.1, 0.3, &mut rng);
    let sd = (a.iter().map(|x| x * x).sum::<f64>() / 1000.0).sqrt();
    assert!((sd - 0.3).abs() < 0.03);
}

#[test]
fn langevin_shares_stop_semantics_and_min_selection() {
    let lm = random_lm(9);
    let kw = missing_keyword(&lm, &[4], 8);
    let obj = keyword_objective(&lm, &[&kw]);
    let cfg = LangevinConfig {
        length: 8,
        max_iterations: 400,
        ..LangevinConfig::default()
    };
    let g = langevin_baseline_generate(&lm, &obj, &[4], &cfg).unwrap();
    check_min_selection(&g);
    let first = g.trace.iterations_to_success();
    if let Some(i) = first {
        assert!(g.trace.stopped_early);
        assert_eq!(i, g.trace.records.len() - 1);
        assert!(g.trace.records[i].ids.contains(&lm.vocab().id(&kw).unwrap()));
    }
    // iteration 0 reads off the greedy path
    let greedy = greedy_decode(&lm, &[4], 8, &LogitPolicy::default()).unwrap();
    assert_eq!(g.trace.records[0].ids, greedy);
    assert_eq!(g, langevin_baseline_generate(&lm, &obj, &[4], &cfg).unwrap());

    let quiet = LangevinConfig {
        noise_scale: 0.0,
        max_iterations: 5,
        ..cfg.clone()
    };
    let a = langevin_baseline_generate(&lm, &obj, &[4], &quiet).unwrap();
    let b = langevin_baseline_generate(&lm, &obj, &[4], &LangevinConfig { seed: 99, ..quiet }).unwrap();
    assert_eq!(a, b);
}


