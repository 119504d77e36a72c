use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, softmax_in_place, Tape, Tensor};

fn small_vocab(n_words: usize) -> Vocab {
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i:02}")).collect();
    Vocab::from_texts(words.iter().map(String::as_str)).unwrap()
}

fn small_config(v: usize) -> LmConfig {
    LmConfig {
        vocab_size: v,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_len: 16,
        dropout: 0.0,
    }
}

/// Random model with weights large enough that logits are far from uniform.
fn random_lm(seed: u64) -> TransformerLm {
    let vocab = small_vocab(12);
    let cfg = small_config(vocab.len());
    let mut lm = TransformerLm::init(vocab, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in lm.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    lm
}

#[test]
fn config_requires_divisible_heads() {
    let mut c = small_config(20);
    c.n_heads = 3;
    assert!(c.validate().is_err());
}

#[test]
fn forward_is_deterministic() {
    let lm = random_lm(1);
    let a = lm.next_token_logits(&[5, 6, 7]).unwrap();
    let b = lm.next_token_logits(&[5, 6, 7]).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn causal_mask_hides_future_positions() {
    let lm = random_lm(2);
    let v = lm.config().vocab_size;
    let run = |ids: &[usize]| {
        let mut t = Tape::new();
        let b = lm.bind(&mut t, false);
        let oh = t.constant(&Tensor::one_hot_rows(ids, v));
        let z = lm.forward_sequence(&mut t, &b, oh).unwrap();
        t.value(z).to_vec()
    };
    let base = run(&[1, 4, 5, 6, 7, 8]);
    for u in 1..6 {
        let mut ids = vec![1, 4, 5, 6, 7, 8];
        ids[u] = 11;
        let changed = run(&ids);
        assert_eq!(&base[..u * v], &changed[..u * v], "position {u} leaked backwards");
        assert_ne!(&base[u * v..], &changed[u * v..]);
    }
}

#[test]
fn incremental_session_matches_full_forward() {
    let lm = random_lm(3);
    let v = lm.config().vocab_size;
    let ids = [1, 9, 4, 4, 10, 5];
    let mut t = Tape::new();
    let b = lm.bind(&mut t, false);
    let oh = t.constant(&Tensor::one_hot_rows(&ids, v));
    let full = lm.forward_sequence(&mut t, &b, oh).unwrap();
    let full = t.value(full).to_vec();
    let mut s = lm.session(b);
    for (r, &id) in ids.iter().enumerate() {
        let oh = t.constant(&Tensor::one_hot(id, v));
        let z = s.step(&mut t, oh).unwrap();
        for (a, b) in t.value(z).iter().zip(&full[r * v..(r + 1) * v]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_gradient_wrt_one_hots_matches_fd() {
    let lm = random_lm(4);
    let v = lm.config().vocab_size;
    let x = Tensor::one_hot_rows(&[1, 6, 8], v);
    let r = grad_check(
        |t, x| {
            let b = lm.bind(t, false);
            let z = lm.forward_logits(t, &b, x)?;
            Ok(t.sum(z))
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "{:?} {}", r.status, r.max_rel_error);
}

#[test]
fn prefix_longer_than_max_len_is_rejected() {
    let lm = random_lm(5);
    let ids = vec![4; 20];
    assert!(matches!(lm.next_token_logits(&ids), Err(crate::Error::SequenceTooLong { .. })));
    assert!(greedy_decode(&lm, &[4, 5], 20, &LogitPolicy::default()).is_err());
}

#[test]
fn greedy_emits_exactly_l_tokens_deterministically() {
    let lm = random_lm(6);
    let p = LogitPolicy::default();
    for l in [1, 5, 12] {
        let a = greedy_decode(&lm, &[4, 5], l, &p).unwrap();
        assert_eq!(a.len(), l);
        assert!(a.iter().all(|&t| t >= RESERVED.len()));
        assert_eq!(a, greedy_decode(&lm, &[4, 5], l, &p).unwrap());
    }
    assert!(greedy_decode(&lm, &[4], 0, &p).is_err());
}

#[test]
fn greedy_picks_argmax_of_penalised_logits() {
    let lm = random_lm(7);
    let p = LogitPolicy::default();
    let prompt = [4, 7];
    let out = greedy_decode(&lm, &prompt, 6, &p).unwrap();
    let mut hist = prompt.to_vec();
    for &tok in &out {
        let mut z = lm.next_token_logits(&hist).unwrap();
        apply_repetition_penalty(&mut z, &hist, p.repetition_penalty).unwrap();
        for r in z.iter_mut().take(RESERVED.len()) {
            *r += BANNED_LOGIT;
        }
        assert_eq!(tok, crate::autodiff::argmax(&z));
        hist.push(tok);
    }
}

#[test]
fn uniform_judge_has_perplexity_v() {
    let vocab = small_vocab(12);
    assert_eq!(vocab.len(), 16);
    let mut lm = TransformerLm::init(vocab, small_config(16), 0).unwrap();
    let n = lm.params().len();
    lm.params_mut()[n - 1] = Tensor::zeros(&[8, 16]);
    let ppl = perplexity(&lm, &[4, 9, 11, 5]).unwrap();
    assert!((ppl - 16.0).abs() < 1e-9);
}

#[test]
fn certain_judge_has_perplexity_one() {
    assert_eq!(perplexity_from_log_probs(&[0.0, 0.0, 0.0]), 1.0);
}

#[test]
fn empty_sequence_perplexity_is_rejected() {
    let lm = random_lm(8);
    assert!(perplexity(&lm, &[]).is_err());
}

#[test]
fn perplexity_matches_product_of_probabilities() {
    // oracle: each prefix evaluated separately, probabilities multiplied
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..20 {
        let lm = random_lm(seed);
        let len = rng.random_range(1..10);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(4..16)).collect();
        let mut prod = 1.0;
        for i in 0..len {
            let mut z = lm.next_token_logits(&ids[..i]).unwrap();
            softmax_in_place(&mut z);
            prod *= z[ids[i]];
        }
        let oracle = prod.powf(-1.0 / len as f64);
        let ppl = perplexity(&lm, &ids).unwrap();
        assert!((ppl - oracle).abs() < 1e-9 * oracle, "{ppl} vs {oracle}");
        assert!(ppl >= 1.0);
    }
}

#[test]
fn untrained_model_is_close_to_uniform() {
    let vocab = small_vocab(60);
    let v = vocab.len();
    let corpus: Vec<String> = (0..300).map(|i| format!("w{:02} w{:02} w{:02}", i % 60, (i * 7) % 60, (i * 13) % 60)).collect();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (_, report) = train_lm(&corpus, vocab, LmConfig::desk(v), &cfg).unwrap();
    let ppl = report.heldout_ppl_before();
    assert!((ppl - v as f64).abs() < 0.05 * v as f64, "untrained ppl {ppl} vs V={v}");
    assert_eq!(report.heldout_loss_before, report.heldout_loss_after);
}

#[test]
fn memorises_a_single_sentence() {
    let text = "w03 w07 w01 w09 w04 w07 w02";
    let vocab = small_vocab(10);
    let cfg = TrainConfig {
        epochs: 150,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut lc = small_config(vocab.len());
    lc.d_model = 16;
    let (lm, report) = train_lm(&[text.to_string()], vocab, lc, &cfg).unwrap();
    assert!(report.heldout_ppl_after() < 1.5, "ppl {}", report.heldout_ppl_after());
    assert!(report.heldout_loss_after < report.heldout_loss_before);

    let ids = lm.vocab().encode_strict(text).unwrap();
    let policy = LogitPolicy {
        repetition_penalty: 1.0,
        ban_reserved: true,
    };
    let cont = greedy_decode(&lm, &ids[..2], ids.len() - 2, &policy).unwrap();
    assert_eq!(cont, ids[2..]);
}

#[test]
fn empty_corpus_is_rejected() {
    let vocab = small_vocab(4);
    let v = vocab.len();
    assert!(train_lm(&[], vocab, small_config(v), &TrainConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let lm = random_lm(10);
    let bytes = lm.to_bytes().unwrap();
    let back = TransformerLm::from_bytes(&bytes).unwrap();
    assert_eq!(back.config(), lm.config());
    assert_eq!(back.vocab(), lm.vocab());
    for (a, b) in lm.params().iter().zip(back.params()) {
        assert_eq!(a, b);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/lm.ckpt");
    lm.save(&path).unwrap();
    let again = TransformerLm::load(&path).unwrap();
    assert_eq!(again.next_token_logits(&[4]).unwrap(), lm.next_token_logits(&[4]).unwrap());
}

#[test]
fn split_keeps_everything_when_too_small() {
    let (tr, held) = split_indices(1, 0.1, 0);
    assert_eq!(tr, vec![0]);
    assert_eq!(held, vec![0]);
    let (tr, held) = split_indices(100, 0.1, 0);
    assert_eq!(held.len(), 10);
    assert_eq!(tr.len(), 90);
}
