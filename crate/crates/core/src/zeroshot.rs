//! Zero-shot story scoring: embed a story with the passage tower, candidate
//! reviews with the critique tower, and score by cosine similarity. A
//! classifier is a labelled ensemble of review paraphrases scored by mean
//! cosine; distributions come from min-subtract softmax normalization.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::tokenizer::{self, Vocabulary};

/// A labelled review classifier: one or more paraphrase variants whose
/// cosine scores are averaged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub label: String,
    pub variants: Vec<String>,
}

impl ClassifierSpec {
    pub fn single(label: &str, review: &str) -> Self {
        ClassifierSpec { label: label.to_string(), variants: vec![review.to_string()] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.variants.iter().any(|v| v.trim().is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "classifier '{}' needs at least one non-empty variant",
                self.label
            )));
        }
        Ok(())
    }
}

/// A normalized probability vector over labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(labels: Vec<String>, probabilities: Vec<f64>) -> Result<Self> {
        if labels.len() != probabilities.len() {
            return Err(Error::shape("score_distribution", "labels and probabilities differ in length"));
        }
        if probabilities.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {}, not 1", sum)));
        }
        Ok(ScoreDistribution { labels, probabilities })
    }
}

/// `softmax(scores - min(scores))`: the normalization used for both human
/// vote counts and model scores. Shift-invariant by construction.
pub fn min_subtract_softmax(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = raw.iter().map(|s| s - min).collect();
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Immutable scoring session: a trained model plus its vocabulary.
pub struct StoryScorer<'a> {
    model: &'a DualEncoder,
    vocab: &'a Vocabulary,
}

impl<'a> StoryScorer<'a> {
    pub fn new(model: &'a DualEncoder, vocab: &'a Vocabulary) -> Self {
        StoryScorer { model, vocab }
    }

    fn embed_story(&self, story: &str) -> Result<Vec<f32>> {
        if story.trim().is_empty() {
            return Err(Error::degenerate("score", "story is empty"));
        }
        let context = self.model.config().context_length;
        let batch = tokenizer::encode(story, self.vocab, context)?;
        let tape = Tape::no_grad();
        Ok(self.model.encode_passages(&tape, &batch)?.to_vec())
    }

    fn embed_reviews(&self, reviews: &[&str]) -> Result<Vec<f32>> {
        let context = self.model.config().context_length;
        let batch = tokenizer::encode_batch(reviews.iter().copied(), self.vocab, context)?;
        let tape = Tape::no_grad();
        Ok(self.model.encode_critiques(&tape, &batch)?.to_vec())
    }

    fn mean_cosine(&self, story_emb: &[f32], spec: &ClassifierSpec) -> Result<f64> {
        let variants: Vec<&str> = spec.variants.iter().map(|s| s.as_str()).collect();
        let review_embs = self.embed_reviews(&variants)?;
        let dim = self.model.config().encoding_dim;
        let mut total = 0.0f64;
        for row in review_embs.chunks(dim) {
            total += cosine_f32(story_emb, row);
        }
        Ok((total / spec.variants.len() as f64).clamp(-1.0, 1.0))
    }

    /// Mean cosine similarity between the story and the spec's variants.
    pub fn score(&self, story: &str, spec: &ClassifierSpec) -> Result<f64> {
        spec.validate()?;
        let story_emb = self.embed_story(story)?;
        self.mean_cosine(&story_emb, spec)
    }

    /// Min-subtract-softmax distribution over at least two classifiers.
    pub fn classify(&self, story: &str, specs: &[ClassifierSpec]) -> Result<ScoreDistribution> {
        if specs.len() < 2 {
            return Err(Error::InvalidArgument("classify needs at least two classifiers".into()));
        }
        let raw = self.raw_scores(story, specs)?;
        let probabilities = min_subtract_softmax(&raw);
        ScoreDistribution::new(specs.iter().map(|s| s.label.clone()).collect(), probabilities)
    }

    /// Raw per-spec scores in spec order (the shape external baseline score
    /// files carry). The story is embedded once and reused.
    pub fn raw_scores(&self, story: &str, specs: &[ClassifierSpec]) -> Result<Vec<f64>> {
        for spec in specs {
            spec.validate()?;
        }
        let story_emb = self.embed_story(story)?;
        specs.iter().map(|spec| self.mean_cosine(&story_emb, spec)).collect()
    }

    /// Candidates sorted by descending cosine to the story; ties keep input
    /// order.
    pub fn rank_reviews(&self, story: &str, candidates: &[String]) -> Result<Vec<(String, f64)>> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("rank_reviews needs at least one candidate".into()));
        }
        let story_emb = self.embed_story(story)?;
        let refs: Vec<&str> = candidates.iter().map(|s| s.as_str()).collect();
        let review_embs = self.embed_reviews(&refs)?;
        let dim = self.model.config().encoding_dim;
        let mut scored: Vec<(String, f64)> = candidates
            .iter()
            .zip(review_embs.chunks(dim))
            .map(|(c, row)| (c.clone(), cosine_f32(&story_emb, row).clamp(-1.0, 1.0)))
            .collect();
        // Stable sort: equal cosines keep candidate order.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite cosines"));
        Ok(scored)
    }
}

fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    // Rows are unit-norm by the encoder contract, so the dot is the cosine.
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// The nine candidate reviews used for multiple-choice story classification.
pub const NINE_REVIEWS: [&str; 9] = [
    "This kind of drags on.",
    "This is a bit too short.",
    "This is too cheery.",
    "This is really depressing.",
    "This is really exciting.",
    "This is boring.",
    "This ending leaves things too open.",
    "This ending feels abrupt.",
    "Could use more visual imagery.",
];

/// Built-in classifier sets.
pub fn load_preset(name: &str) -> Result<Vec<ClassifierSpec>> {
    match name {
        "nine-reviews" => Ok(NINE_REVIEWS.iter().map(|r| ClassifierSpec::single(r, r)).collect()),
        "carp-prompting" => Ok(vec![
            // Smiley-face reviews flag passages the editor liked.
            ClassifierSpec {
                label: "positive-sentiment".into(),
                variants: vec![":)".into(), ":D".into(), "I really liked this :)".into()],
            },
            // Critiques opening with a quotation flag wording problems.
            ClassifierSpec {
                label: "wording-or-grammar".into(),
                variants: vec![
                    "[quote] I don't understand this sentence.".into(),
                    "[quote] I think you can cut this.".into(),
                ],
            },
            ClassifierSpec {
                label: "show-dont-tell".into(),
                variants: vec!["Show, don't tell".into(), "Show, don't tell!".into()],
            },
        ]),
        other => Err(Error::InvalidArgument(format!("unknown preset '{}'", other))),
    }
}
