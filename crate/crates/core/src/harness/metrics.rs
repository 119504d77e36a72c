//! Automatic evaluation metrics over token sequences.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::discriminator::AttributeClassifier;
use crate::error::{Error, Result};

/// Distinct-n over one set of generations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistN {
    /// Distinct n-grams over all n-grams, pooled across the set.
    pub value: f64,
    /// Generations shorter than `n`, left out of the pool.
    pub excluded: usize,
}

/// Distinct-n for the generations of one prompt. Fails when no generation
/// has `n` tokens.
pub fn dist_n<T: Eq + Hash>(generations: &[Vec<T>], n: usize) -> Result<DistN> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let mut seen: HashSet<&[T]> = HashSet::new();
    let (mut total, mut excluded) = (0usize, 0usize);
    for g in generations {
        if g.len() < n {
            excluded += 1;
            continue;
        }
        for w in g.windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid(format!("no generation has {n} tokens")));
    }
    Ok(DistN {
        value: seen.len() as f64 / total as f64,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepNgram {
    /// Occurrences of each n-gram beyond its first.
    pub count: usize,
    /// The sequence had fewer than `n` tokens; `count` is 0.
    pub too_short: bool,
}

pub fn rep_ngram<T: Eq + Hash>(sequence: &[T], n: usize) -> Result<RepNgram> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if sequence.len() < n {
        return Ok(RepNgram {
            count: 0,
            too_short: true,
        });
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for w in sequence.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    Ok(RepNgram {
        count: counts.values().map(|c| c - 1).sum(),
        too_short: false,
    })
}

fn check_keywords(keywords: &[usize]) -> Result<()> {
    if keywords.is_empty() {
        return Err(Error::invalid("keyword list is empty"));
    }
    Ok(())
}

/// Fraction of `keywords` that occur in `generation`.
pub fn keyword_coverage(generation: &[usize], keywords: &[usize]) -> Result<f64> {
    check_keywords(keywords)?;
    let present = keywords.iter().filter(|k| generation.contains(k)).count();
    Ok(present as f64 / keywords.len() as f64)
}

/// Fraction of generations containing at least one keyword; 0 for no generations.
pub fn success_rate(generations: &[Vec<usize>], keywords: &[usize]) -> Result<f64> {
    check_keywords(keywords)?;
    if generations.is_empty() {
        return Ok(0.0);
    }
    let hits = generations
        .iter()
        .filter(|g| keywords.iter().any(|k| g.contains(k)))
        .count();
    Ok(hits as f64 / generations.len() as f64)
}

/// Mean per-generation keyword coverage; 0 for no generations.
pub fn mean_coverage(generations: &[Vec<usize>], keywords: &[usize]) -> Result<f64> {
    check_keywords(keywords)?;
    if generations.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for g in generations {
        sum += keyword_coverage(g, keywords)?;
    }
    Ok(sum / generations.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    /// Fraction of generations whose most probable class is the target.
    pub accuracy: f64,
    /// Mean over prompts of the largest target probability in the prompt's set.
    pub avg_max: f64,
    /// Fraction of prompts whose set has a target probability above 0.5.
    pub exceedance: f64,
}

/// Classifier output for one generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    /// Probability of the class being measured.
    pub p: f64,
    /// Whether that class is the classifier's argmax.
    pub predicted: bool,
}

/// [`AttributeMetrics`] from precomputed scores, grouped by prompt. Empty
/// groups are skipped.
pub fn attribute_metrics_from_scores(groups: &[Vec<AttributeScore>]) -> AttributeMetrics {
    let groups: Vec<&Vec<AttributeScore>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    if n == 0 {
        return AttributeMetrics::default();
    }
    let correct = groups.iter().flat_map(|g| g.iter()).filter(|s| s.predicted).count();
    let maxes: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|s| s.p).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    AttributeMetrics {
        accuracy: correct as f64 / n as f64,
        avg_max: maxes.iter().sum::<f64>() / maxes.len() as f64,
        exceedance: maxes.iter().filter(|&&m| m > 0.5).count() as f64 / maxes.len() as f64,
    }
}

/// Scores one token sequence for `class`.
pub fn attribute_score(clf: &AttributeClassifier, ids: &[usize], class: &str) -> Result<AttributeScore> {
    let c = clf.class_index(class)?;
    let probs = clf.predict_ids(ids)?;
    // ties resolve to the lowest index, as everywhere else
    let best = probs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
    Ok(AttributeScore {
        p: probs[c],
        predicted: best == c,
    })
}

/// Accuracy, average-max and exceedance of `class` over per-prompt sets of
/// token sequences.
pub fn attribute_metrics(clf: &AttributeClassifier, sets: &[Vec<Vec<usize>>], class: &str) -> Result<AttributeMetrics> {
    let mut groups = Vec::with_capacity(sets.len());
    for set in sets {
        let scores = set
            .iter()
            .map(|ids| attribute_score(clf, ids, class))
            .collect::<Result<Vec<_>>>()?;
        groups.push(scores);
    }
    Ok(attribute_metrics_from_scores(&groups))
}

/// Generated tokens over decode wall-clock, pooled over `(tokens, seconds)` samples.
pub fn tokens_per_second(samples: &[(usize, f64)]) -> Result<f64> {
    let tokens: usize = samples.iter().map(|s| s.0).sum();
    let seconds: f64 = samples.iter().map(|s| s.1).sum();
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::invalid(format!("elapsed time must be positive, got {seconds}")));
    }
    Ok(tokens as f64 / seconds)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
