//! Prompt and keyword fixtures, plus a seeded generator for the synthetic
//! desk-scale corpora.
//!
//! Every generated line is one of the bundled prompts followed by two to six
//! short clauses. Each line carries a single sentiment polarity, expressed by
//! marker adjectives and verbs, so a unigram rule labels it perfectly. About a
//! third of the lines mention one topic, drawing nouns from its keyword list; each
//! keyword is usually preceded by a collocate word of its own.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Vocab;

pub const PROMPTS_TXT: &str = include_str!("../fixtures/prompts.txt");
pub const KEYWORDS_TXT: &str = include_str!("../fixtures/keywords.txt");

pub const POSITIVE: &str = "positive";
pub const NEGATIVE: &str = "negative";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub keywords: Vec<String>,
}

/// One prompt per non-blank line, surrounding whitespace trimmed.
pub fn parse_prompts(text: &str) -> Result<Vec<String>> {
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        return Err(Error::Config("prompt list is empty".into()));
    }
    Ok(prompts)
}

/// Lines of the form `topic: w1,w2,w3,w4`.
pub fn parse_topics(text: &str) -> Result<Vec<Topic>> {
    let mut topics = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, words) = line
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("keyword line {}: missing `:`", n + 1)))?;
        let keywords: Vec<String> = words
            .split(',')
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(String::from)
            .collect();
        if keywords.is_empty() || keywords.iter().any(|w| w.contains(char::is_whitespace)) {
            return Err(Error::Config(format!("keyword line {}: expected single-word keywords", n + 1)));
        }
        topics.push(Topic {
            name: name.trim().to_string(),
            keywords,
        });
    }
    if topics.is_empty() {
        return Err(Error::Config("keyword list is empty".into()));
    }
    Ok(topics)
}

pub fn bundled_prompts() -> Vec<String> {
    parse_prompts(PROMPTS_TXT).expect("bundled prompts parse")
}

pub fn bundled_topics() -> Vec<Topic> {
    parse_topics(KEYWORDS_TXT).expect("bundled keywords parse")
}

const BE: &[&str] = &["was", "is", "seemed", "felt", "looked", "became"];
const INTENS: &[&str] = &["very", "really", "so", "quite", "truly", "rather", "extremely", "pretty"];
const POS_ADJ: &[&str] = &[
    "good", "great", "wonderful", "lovely", "delightful", "amazing", "pleasant", "beautiful", "excellent", "charming",
    "fantastic", "superb", "brilliant", "nice", "perfect", "joyful", "splendid", "marvelous", "fine", "sweet",
];
const NEG_ADJ: &[&str] = &[
    "bad", "awful", "terrible", "horrible", "boring", "dreadful", "ugly", "disappointing", "miserable", "poor",
    "nasty", "gloomy", "dull", "rotten", "sad", "grim", "bleak", "painful", "weak", "mediocre",
];
const POS_VERB: &[&str] = &["loved", "liked", "enjoyed", "adored", "praised", "admired"];
const NEG_VERB: &[&str] = &["hated", "disliked", "regretted", "despised", "feared", "avoided"];
const PRON: &[&str] = &["we", "they", "everyone", "i", "people", "he", "she"];
const VERB: &[&str] = &[
    "saw", "found", "met", "passed", "watched", "visited", "reached", "crossed", "left", "followed", "noticed",
    "joined", "opened", "carried", "painted", "described",
];
const DET: &[&str] = &["the", "a", "this", "that", "one"];
const NOUN: &[&str] = &[
    "man", "woman", "river", "house", "garden", "market", "village", "tree", "table", "window", "door", "street",
    "child", "dog", "hill", "bridge", "school", "station", "field", "friend", "farmer", "teacher", "boat", "car",
    "train", "forest", "mountain", "shop", "kitchen", "letter", "song", "story", "cat", "bird", "king", "queen",
    "doctor", "baker", "sailor", "apple", "bread", "coat", "hat", "chair", "lamp", "ship", "wall", "roof", "clock",
    "bell", "flower", "stone", "path", "gate", "sky", "sun", "moon", "rain", "snow", "wolf", "fox", "pond", "island",
    "castle", "tower", "camp", "cave", "desert", "harbor", "valley", "well", "barn", "fence", "wagon", "basket",
    "candle", "mirror", "pillow", "blanket", "piano", "violin", "drum", "painter", "writer", "singer", "dancer",
    "hunter", "fisher", "nurse",
];
const PREP: &[&str] = &["near", "by", "behind", "beside", "across", "under", "with", "over", "past", "along"];
const ADV: &[&str] = &["yesterday", "later", "again", "then", "today", "slowly", "quietly", "finally", "soon"];
const GLUE: &[&str] = &["and", "it", "every", "minute", "of", "there", "."];

/// Sentiment polarity of a generated line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn label(self) -> &'static str {
        match self {
            Polarity::Positive => POSITIVE,
            Polarity::Negative => NEGATIVE,
        }
    }

    fn adjectives(self) -> &'static [&'static str] {
        match self {
            Polarity::Positive => POS_ADJ,
            Polarity::Negative => NEG_ADJ,
        }
    }

    fn verbs(self) -> &'static [&'static str] {
        match self {
            Polarity::Positive => POS_VERB,
            Polarity::Negative => NEG_VERB,
        }
    }
}

/// Words that mark a polarity on their own. No word appears in both lists.
pub fn polarity_markers(p: Polarity) -> impl Iterator<Item = &'static str> {
    p.adjectives().iter().chain(p.verbs()).copied()
}

/// Unigram oracle: the polarity whose markers occur in `text`, if exactly one
/// does.
pub fn marker_polarity(text: &str) -> Option<Polarity> {
    let has = |p: Polarity| text.split_whitespace().any(|w| polarity_markers(p).any(|m| m == w));
    match (has(Polarity::Positive), has(Polarity::Negative)) {
        (true, false) => Some(Polarity::Positive),
        (false, true) => Some(Polarity::Negative),
        _ => None,
    }
}

/// Generator for the synthetic world: prompts, topics and a closed lexicon.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub prompts: Vec<String>,
    pub topics: Vec<Topic>,
}

#[derive(Clone, Copy, PartialEq)]
enum Clause {
    Sentiment,
    Neutral,
    Topic,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        SyntheticWorld {
            prompts: bundled_prompts(),
            topics: bundled_topics(),
        }
    }
}

impl SyntheticWorld {
    /// Every word the generator can emit, plus all prompt and keyword words.
    pub fn vocab(&self) -> Result<Vocab> {
        let lexicon = [
            BE, INTENS, POS_ADJ, NEG_ADJ, POS_VERB, NEG_VERB, PRON, VERB, DET, NOUN, PREP, ADV, GLUE, COLLOCATES,
        ];
        let words = lexicon
            .iter()
            .flat_map(|l| l.iter().copied())
            .chain(self.prompts.iter().map(String::as_str))
            .chain(self.topics.iter().flat_map(|t| t.keywords.iter().map(String::as_str)));
        Vocab::from_texts(words)
    }

    /// `n` lines, each paired with its polarity.
    pub fn labeled_lines(&self, n: usize, seed: u64) -> Vec<(String, Polarity)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.line(&mut rng)).collect()
    }

    /// `n` unlabeled lines for language-model training.
    pub fn lm_corpus(&self, n: usize, seed: u64) -> Vec<String> {
        self.labeled_lines(n, seed).into_iter().map(|(l, _)| l).collect()
    }

    fn line(&self, rng: &mut ChaCha8Rng) -> (String, Polarity) {
        let pol = if rng.random_bool(0.5) {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        let ti = rng.random_range(0..self.topics.len());
        let topic = &self.topics[ti];
        let offset: usize = self.topics[..ti].iter().map(|t| t.keywords.len()).sum();
        let n_clauses = rng.random_range(2..=6);
        let mut kinds: Vec<Clause> = (0..n_clauses)
            .map(|i| {
                let r = rng.random::<f64>();
                let (s, n) = if i == 0 { (0.45, 0.9) } else { (0.35, 0.88) };
                if r < s {
                    Clause::Sentiment
                } else if r < n {
                    Clause::Neutral
                } else {
                    Clause::Topic
                }
            })
            .collect();
        if !kinds.contains(&Clause::Sentiment) {
            let i = rng.random_range(0..kinds.len());
            kinds[i] = Clause::Sentiment;
        }
        let mut words: Vec<&str> = self.prompts.choose(rng).expect("at least one prompt").split_whitespace().collect();
        for (i, kind) in kinds.into_iter().enumerate() {
            let lead = i == 0;
            match kind {
                Clause::Sentiment => sentiment_clause(rng, pol, lead, &mut words),
                Clause::Neutral => neutral_clause(rng, lead, &mut words),
                Clause::Topic => topic_clause(rng, topic, offset, lead, &mut words),
            }
            words.push(".");
        }
        (words.join(" "), pol)
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).expect("non-empty word list")
}

fn sentiment_clause<'a>(rng: &mut ChaCha8Rng, pol: Polarity, lead: bool, out: &mut Vec<&'a str>) {
    let form = if lead { rng.random_range(0..2) } else { rng.random_range(0..4) };
    match form {
        0 | 1 => {
            out.push(pick(rng, BE));
            if rng.random_bool(0.5) {
                out.push(pick(rng, INTENS));
            }
            out.push(pick(rng, pol.adjectives()));
            if form == 1 {
                out.push("and");
                out.push(pick(rng, pol.adjectives()));
            }
        }
        2 => {
            out.extend(["it", "was"]);
            if rng.random_bool(0.5) {
                out.push(pick(rng, INTENS));
            }
            out.push(pick(rng, pol.adjectives()));
        }
        _ => {
            out.push(pick(rng, PRON));
            out.push(pick(rng, pol.verbs()));
            if rng.random_bool(0.5) {
                out.push("it");
            } else {
                out.extend(["every", "minute", "of", "it"]);
            }
        }
    }
}

fn neutral_clause<'a>(rng: &mut ChaCha8Rng, lead: bool, out: &mut Vec<&'a str>) {
    if !lead {
        out.push(pick(rng, PRON));
    }
    out.push(pick(rng, VERB));
    out.push(pick(rng, DET));
    out.push(pick(rng, NOUN));
    if rng.random_bool(0.5) {
        out.push(pick(rng, PREP));
        out.push(pick(rng, DET));
        out.push(pick(rng, NOUN));
    }
    if rng.random_bool(0.3) {
        out.push(pick(rng, ADV));
    }
}

/// Keyword `k` of topic-major order is usually preceded by collocate `k`, so
/// keywords of one topic do not share identical contexts.
const COLLOCATES: &[&str] = &[
    "old", "new", "small", "large", "red", "blue", "green", "quiet", "loud", "young", "tall", "short", "bright",
    "dark", "heavy", "light", "warm", "cold", "round", "long", "narrow", "wide", "famous", "strange", "distant",
    "local", "simple", "hidden", "silver", "golden", "wooden", "broken",
];

/// Pushes keyword `j` of the topic whose first keyword has global index `offset`.
fn push_keyword<'a>(rng: &mut ChaCha8Rng, topic: &'a Topic, offset: usize, j: usize, out: &mut Vec<&'a str>) {
    if rng.random_bool(0.7) {
        out.push(COLLOCATES[(offset + j) % COLLOCATES.len()]);
    }
    out.push(&topic.keywords[j]);
}

fn topic_clause<'a>(rng: &mut ChaCha8Rng, topic: &'a Topic, offset: usize, lead: bool, out: &mut Vec<&'a str>) {
    let n = topic.keywords.len();
    let first = rng.random_range(0..n);
    let form = if lead { rng.random_range(0..2) } else { rng.random_range(0..3) };
    if form == 2 {
        out.extend(["there", "was", pick(rng, DET)]);
        push_keyword(rng, topic, offset, first, out);
        out.extend([pick(rng, PREP), pick(rng, DET)]);
        if rng.random_bool(0.5) {
            let j = rng.random_range(0..n);
            push_keyword(rng, topic, offset, j, out);
        } else {
            out.push(pick(rng, NOUN));
        }
        return;
    }
    if !lead {
        out.push(pick(rng, PRON));
    }
    out.extend([pick(rng, VERB), pick(rng, DET)]);
    push_keyword(rng, topic, offset, first, out);
    if form == 0 {
        out.extend([pick(rng, PREP), pick(rng, DET), pick(rng, NOUN)]);
    } else {
        out.extend(["and", pick(rng, DET)]);
        let j = rng.random_range(0..n);
        push_keyword(rng, topic, offset, j, out);
    }
}
