//! Corpus-quality statistics: critique length distributions split by
//! sentiment and the share of negative critiques with toxicity above a
//! threshold. Scorers are pluggable; lexicon defaults ship with the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::PassageCritiquePair;

pub const DEFAULT_TOXICITY_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

pub trait SentimentScorer {
    fn score(&self, text: &str) -> Result<Sentiment>;
}

/// Toxicity in [0, 1]; out-of-range values count as scorer failures.
pub trait ToxicityScorer {
    fn score(&self, text: &str) -> Result<f64>;
}

const POSITIVE_WORDS: &[&str] = &[
    "good", "great", "love", "loved", "like", "liked", "nice", "excellent", "wonderful",
    "enjoyed", "beautiful", "amazing", "fun", "haha", "lol", "awesome", "fantastic", "perfect",
    "sweet", "cool", "brilliant", "charming", "vivid", "strong", "works", "smooth", "clear",
];

const NEGATIVE_WORDS: &[&str] = &[
    "bad", "boring", "hate", "hated", "awful", "terrible", "poor", "weak", "confusing",
    "dull", "worse", "worst", "wrong", "annoying", "cut", "drags", "cliche", "flat", "slow",
    "abrupt", "unclear", "awkward", "messy", "broken", "clunky", "stilted", "bland",
];

const INSULT_WORDS: &[&str] = &[
    "stupid", "idiot", "idiotic", "dumb", "trash", "garbage", "moron", "pathetic",
    "worthless", "lazy", "talentless", "hack", "clueless", "illiterate",
];

fn count_hits(text: &str, words: &[&str]) -> usize {
    crate::tokenizer::tokenize(text)
        .iter()
        .filter(|t| words.contains(&t.as_str()))
        .count()
}

/// Word-list sentiment: positive unless negative cues outnumber positive ones.
pub struct LexiconSentiment;

impl SentimentScorer for LexiconSentiment {
    fn score(&self, text: &str) -> Result<Sentiment> {
        let pos = count_hits(text, POSITIVE_WORDS);
        let neg = count_hits(text, NEGATIVE_WORDS);
        Ok(if neg > pos { Sentiment::Negative } else { Sentiment::Positive })
    }
}

/// Word-list toxicity: 0 with no insult cues, approaching 1 as they stack.
pub struct LexiconToxicity;

impl ToxicityScorer for LexiconToxicity {
    fn score(&self, text: &str) -> Result<f64> {
        let hits = count_hits(text, INSULT_WORDS) as i32;
        Ok(1.0 - 0.5f64.powi(hits))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile on a sorted slice (the common "R-7" rule).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let idx = p * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Some(Quartiles {
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthSplit {
    pub count: usize,
    pub mean_words: Option<f64>,
    pub quartiles: Option<Quartiles>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub records: usize,
    pub scored: usize,
    pub scorer_failures: usize,
    pub toxicity_threshold: f64,
    pub positive: LengthSplit,
    pub negative: LengthSplit,
    /// Fraction of negative critiques whose toxicity exceeds the threshold.
    pub negative_toxic_frequency: Option<f64>,
}

fn split(lengths: &[f64]) -> LengthSplit {
    LengthSplit {
        count: lengths.len(),
        mean_words: if lengths.is_empty() {
            None
        } else {
            Some(lengths.iter().sum::<f64>() / lengths.len() as f64)
        },
        quartiles: quartiles(lengths),
    }
}

/// Score every pair's critique for sentiment and (when negative) toxicity.
/// Records whose scorer errors — or returns an out-of-range toxicity — are
/// excluded and counted.
pub fn corpus_stats<'a>(
    pairs: impl IntoIterator<Item = &'a PassageCritiquePair>,
    sentiment: &dyn SentimentScorer,
    toxicity: &dyn ToxicityScorer,
    threshold: f64,
) -> Result<StatsReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("toxicity threshold {} outside [0,1]", threshold)));
    }
    let mut records = 0usize;
    let mut failures = 0usize;
    let mut positive_lengths = Vec::new();
    let mut negative_lengths = Vec::new();
    let mut negative_toxic = 0usize;

    for pair in pairs {
        records += 1;
        let words = pair.critique.split_whitespace().count() as f64;
        match sentiment.score(&pair.critique) {
            Ok(Sentiment::Positive) => positive_lengths.push(words),
            Ok(Sentiment::Negative) => match toxicity.score(&pair.critique) {
                Ok(score) if (0.0..=1.0).contains(&score) => {
                    negative_lengths.push(words);
                    if score > threshold {
                        negative_toxic += 1;
                    }
                }
                _ => failures += 1,
            },
            Err(_) => failures += 1,
        }
    }

    let negative_toxic_frequency =
        (!negative_lengths.is_empty()).then(|| negative_toxic as f64 / negative_lengths.len() as f64);
    Ok(StatsReport {
        records,
        scored: records - failures,
        scorer_failures: failures,
        toxicity_threshold: threshold,
        positive: split(&positive_lengths),
        negative: split(&negative_lengths),
        negative_toxic_frequency,
    })
}
