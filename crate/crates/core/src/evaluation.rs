//! Human-alignment evaluation: aggregate vote counts into distributions,
//! compare model distributions against them with cosine similarity and
//! KL(human || model), and fold per-story rows into box-plot-ready summaries.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{quartiles, Quartiles};
use crate::zeroshot::{min_subtract_softmax, ClassifierSpec, ScoreDistribution, StoryScorer};

/// Model probabilities below this are clamped before the KL log; the row is
/// flagged so zero-probability data problems stay visible.
pub const KL_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Story {
    pub story_id: String,
    pub text: String,
}

/// Aggregated human votes for one story: one count per candidate label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanVotes {
    pub story_id: String,
    pub labels: Vec<String>,
    pub counts: Vec<u64>,
}

impl HumanVotes {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.counts.len() {
            return Err(Error::Data(format!(
                "votes for '{}': {} labels vs {} counts",
                self.story_id,
                self.labels.len(),
                self.counts.len()
            )));
        }
        if self.counts.iter().all(|c| *c == 0) {
            return Err(Error::Data(format!("votes for '{}' are all zero", self.story_id)));
        }
        Ok(())
    }
}

/// Raw per-label scores produced outside this crate (e.g. by a language-model
/// baseline); normalized with the same min-subtract softmax as everything
/// else.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalScores {
    pub story_id: String,
    pub raw_scores: Vec<f64>,
}

/// `softmax(counts - min(counts))` over the vote labels.
pub fn human_distribution(votes: &HumanVotes) -> Result<ScoreDistribution> {
    votes.validate()?;
    let raw: Vec<f64> = votes.counts.iter().map(|c| *c as f64).collect();
    ScoreDistribution::new(votes.labels.clone(), min_subtract_softmax(&raw))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub story_id: String,
    pub cosine: f64,
    pub kl: f64,
    /// True when a model probability had to be clamped up to the floor
    /// (the unclamped KL would be infinite).
    pub kl_clamped: bool,
}

/// Cosine similarity and KL(human || model) between two distributions over
/// the same labels in the same order.
pub fn compare(story_id: &str, human: &ScoreDistribution, model: &ScoreDistribution) -> Result<ComparisonRow> {
    if human.labels != model.labels {
        return Err(Error::Data(format!("label mismatch for story '{}'", story_id)));
    }
    let mut dot = 0.0;
    let mut norm_h = 0.0;
    let mut norm_m = 0.0;
    for (h, m) in human.probabilities.iter().zip(&model.probabilities) {
        dot += h * m;
        norm_h += h * h;
        norm_m += m * m;
    }
    let cosine = dot / (norm_h.sqrt() * norm_m.sqrt());

    let mut kl = 0.0;
    let mut kl_clamped = false;
    for (h, m) in human.probabilities.iter().zip(&model.probabilities) {
        if *h <= 0.0 {
            continue; // 0 * ln(0/m) = 0 by convention
        }
        let mut m = *m;
        if m < KL_PROB_FLOOR {
            kl_clamped = true;
            m = KL_PROB_FLOOR;
        }
        kl += h * (h / m).ln();
    }
    Ok(ComparisonRow { story_id: story_id.to_string(), cosine, kl, kl_clamped })
}

/// Where a method's score distributions come from.
pub enum ScoreSource<'a> {
    /// The dual encoder, classified through the zero-shot path.
    Model(&'a StoryScorer<'a>),
    /// Pre-computed raw score files.
    External(&'a [ExternalScores]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    let q: Quartiles = quartiles(values).ok_or_else(|| Error::degenerate("summarize", "no rows"))?;
    Ok(SummaryStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        min: q.min,
        q1: q.q1,
        median: q.median,
        q3: q.q3,
        max: q.max,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub rows: Vec<ComparisonRow>,
    pub cosine_summary: SummaryStats,
    pub kl_summary: SummaryStats,
}

/// Score every story with one method and compare against the human
/// distributions. Stories and votes pair by `story_id`; vote labels must
/// match the classifier labels exactly.
pub fn evaluate_suite(
    method: &str,
    source: &ScoreSource,
    stories: &[Story],
    votes: &[HumanVotes],
    specs: &[ClassifierSpec],
) -> Result<MethodReport> {
    if stories.is_empty() {
        return Err(Error::degenerate("evaluate_suite", "no stories"));
    }
    let spec_labels: Vec<String> = specs.iter().map(|s| s.label.clone()).collect();
    let votes_by_id: HashMap<&str, &HumanVotes> = votes.iter().map(|v| (v.story_id.as_str(), v)).collect();
    let external_by_id: HashMap<&str, &ExternalScores> = match source {
        ScoreSource::External(rows) => rows.iter().map(|r| (r.story_id.as_str(), r)).collect(),
        ScoreSource::Model(_) => HashMap::new(),
    };

    let mut rows = Vec::with_capacity(stories.len());
    for story in stories {
        let vote = votes_by_id
            .get(story.story_id.as_str())
            .ok_or_else(|| Error::Data(format!("no votes for story '{}'", story.story_id)))?;
        if vote.labels != spec_labels {
            return Err(Error::Data(format!(
                "vote labels for '{}' differ from classifier labels",
                story.story_id
            )));
        }
        let human = human_distribution(vote)?;
        let model_dist = match source {
            ScoreSource::Model(scorer) => scorer.classify(&story.text, specs)?,
            ScoreSource::External(_) => {
                let ext = external_by_id
                    .get(story.story_id.as_str())
                    .ok_or_else(|| Error::Data(format!("no external scores for story '{}'", story.story_id)))?;
                if ext.raw_scores.len() != spec_labels.len() {
                    return Err(Error::Data(format!(
                        "external scores for '{}' have {} entries, expected {}",
                        story.story_id,
                        ext.raw_scores.len(),
                        spec_labels.len()
                    )));
                }
                ScoreDistribution::new(spec_labels.clone(), min_subtract_softmax(&ext.raw_scores))?
            }
        };
        rows.push(compare(&story.story_id, &human, &model_dist)?);
    }

    let cosines: Vec<f64> = rows.iter().map(|r| r.cosine).collect();
    let kls: Vec<f64> = rows.iter().map(|r| r.kl).collect();
    Ok(MethodReport {
        method: method.to_string(),
        rows,
        cosine_summary: summarize(&cosines)?,
        kl_summary: summarize(&kls)?,
    })
}

/// Per-story rows for all methods as CSV.
pub fn write_rows_csv(reports: &[MethodReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "method,story_id,cosine,kl,kl_clamped")?;
    for report in reports {
        for row in &report.rows {
            writeln!(out, "{},{},{},{},{}", report.method, row.story_id, row.cosine, row.kl, row.kl_clamped)?;
        }
    }
    Ok(())
}

/// Box-plot-ready summary per method and metric as CSV.
pub fn write_summary_csv(reports: &[MethodReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "method,metric,mean,min,q1,median,q3,max")?;
    for report in reports {
        for (metric, s) in [("cosine", &report.cosine_summary), ("kl", &report.kl_summary)] {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                report.method, metric, s.mean, s.min, s.q1, s.median, s.q3, s.max
            )?;
        }
    }
    Ok(())
}
