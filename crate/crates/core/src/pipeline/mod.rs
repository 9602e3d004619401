//! Preprocessing pipeline over JSONL records: quote masking, anonymization,
//! short-record filtering, plus corpus statistics.

mod anonymize;
mod quotes;
mod stats;

pub use anonymize::{
    anonymize, anonymize_pair, anonymize_texts, default_name_pool, EntityMention, EntityRecognizer,
    HeuristicRecognizer, NoopRecognizer,
};
pub use quotes::{longest_shared_run_len, mask_quotes};
pub use stats::{
    corpus_stats, quantile, quartiles, LengthSplit, LexiconSentiment, LexiconToxicity, Quartiles,
    Sentiment, SentimentScorer, StatsReport, ToxicityScorer, DEFAULT_TOXICITY_THRESHOLD,
};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MASK_THRESHOLD: usize = 4;
pub const MIN_FIELD_CHARS: usize = 8;

/// One input record: raw passage and critique with optional metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub passage: String,
    pub critique: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_count: Option<u64>,
}

/// A preprocessed record: critique quote-masked, both fields anonymized,
/// both at least [`MIN_FIELD_CHARS`] characters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassageCritiquePair {
    pub passage: String,
    pub critique: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_count: Option<u64>,
    /// Names of the passes applied, in order.
    #[serde(default)]
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    ShortPassage,
    ShortCritique,
}

/// Keep/drop decision for a preprocessed pair: drop when either field is
/// shorter than eight characters (mask tokens included, after masking).
pub fn filter_short(pair: &PassageCritiquePair) -> Option<DropReason> {
    if pair.passage.chars().count() < MIN_FIELD_CHARS {
        Some(DropReason::ShortPassage)
    } else if pair.critique.chars().count() < MIN_FIELD_CHARS {
        Some(DropReason::ShortCritique)
    } else {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mask_threshold: usize,
    /// Error on malformed JSONL lines instead of skipping them.
    pub strict: bool,
    pub name_pool: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            strict: false,
            name_pool: default_name_pool(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineReport {
    pub records_in: usize,
    pub records_out: usize,
    pub dropped_short_passage: usize,
    pub dropped_short_critique: usize,
    pub parse_errors: usize,
    pub dropped_percent: f64,
}

impl PipelineReport {
    fn finalize(mut self) -> Self {
        let dropped = self.records_in - self.records_out;
        self.dropped_percent = if self.records_in == 0 {
            0.0
        } else {
            100.0 * dropped as f64 / self.records_in as f64
        };
        self
    }
}

/// Apply mask_quotes -> anonymize -> filter_short to one record.
pub fn process_record(
    record: &RawRecord,
    cfg: &PipelineConfig,
    recognizer: &dyn EntityRecognizer,
) -> Result<(PassageCritiquePair, Option<DropReason>)> {
    let masked = mask_quotes(&record.passage, &record.critique, cfg.mask_threshold)?;
    let (passage, critique) = anonymize_pair(&record.passage, &masked, recognizer, &cfg.name_pool)?;
    let pair = PassageCritiquePair {
        passage,
        critique,
        critique_type: record.critique_type.clone(),
        word_count: record.word_count,
        provenance: vec!["mask_quotes".into(), "anonymize".into()],
    };
    let decision = filter_short(&pair);
    Ok((pair, decision))
}

/// Stream JSONL records through the preprocessing passes. Malformed lines
/// are counted and skipped unless `cfg.strict`; blank lines are ignored.
pub fn run_pipeline(
    input: impl BufRead,
    mut output: impl Write,
    cfg: &PipelineConfig,
    recognizer: &dyn EntityRecognizer,
) -> Result<PipelineReport> {
    let mut report = PipelineReport {
        records_in: 0,
        records_out: 0,
        dropped_short_passage: 0,
        dropped_short_critique: 0,
        parse_errors: 0,
        dropped_percent: 0.0,
    };
    for (line_no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.records_in += 1;
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                if cfg.strict {
                    return Err(Error::Data(format!("line {}: {}", line_no + 1, e)));
                }
                report.parse_errors += 1;
                continue;
            }
        };
        let (pair, decision) = process_record(&record, cfg, recognizer)?;
        match decision {
            Some(DropReason::ShortPassage) => report.dropped_short_passage += 1,
            Some(DropReason::ShortCritique) => report.dropped_short_critique += 1,
            None => {
                writeln!(output, "{}", serde_json::to_string(&pair)?)?;
                report.records_out += 1;
            }
        }
    }
    output.flush()?;
    Ok(report.finalize())
}

/// Read preprocessed pairs back from JSONL.
pub fn read_pairs(input: impl BufRead) -> Result<Vec<PassageCritiquePair>> {
    let mut pairs = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line)?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(passage: &str, critique: &str) -> String {
        serde_json::to_string(&RawRecord {
            passage: passage.into(),
            critique: critique.into(),
            critique_type: None,
            word_count: None,
        })
        .unwrap()
    }

    #[test]
    fn empty_input_gives_empty_output_and_zero_counts() {
        let mut out = Vec::new();
        let report = run_pipeline("".as_bytes(), &mut out, &PipelineConfig::default(), &HeuristicRecognizer::new()).unwrap();
        assert!(out.is_empty());
        assert_eq!(report.records_in, 0);
        assert_eq!(report.dropped_percent, 0.0);
    }

    #[test]
    fn short_critiques_are_dropped_and_counted() {
        let mut lines: Vec<String> = (0..9)
            .map(|i| record(&format!("a passage with enough text {}", i), "a decent critique of it"))
            .collect();
        lines.push(record("a passage with enough text", "lol"));
        let input = lines.join("\n");

        let mut out = Vec::new();
        let report = run_pipeline(input.as_bytes(), &mut out, &PipelineConfig::default(), &HeuristicRecognizer::new()).unwrap();
        assert_eq!(report.records_in, 10);
        assert_eq!(report.records_out, 9);
        assert_eq!(report.dropped_short_critique, 1);
        assert!((report.dropped_percent - 10.0).abs() < 1e-12);
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 9);
    }

    #[test]
    fn boundary_lengths_follow_less_than_eight_rule() {
        for (len, kept) in [(7usize, false), (8, true), (9, true)] {
            let critique: String = "x".repeat(len);
            let pair = PassageCritiquePair {
                passage: "long enough passage".into(),
                critique,
                critique_type: None,
                word_count: None,
                provenance: Vec::new(),
            };
            assert_eq!(filter_short(&pair).is_none(), kept, "len {}", len);
        }
    }

    #[test]
    fn malformed_lines_skip_or_fail_by_mode() {
        let input = format!("{}\nnot json\n{}", record("a fine passage here", "a fine critique here"), record("another passage text", "another critique text"));

        let mut out = Vec::new();
        let report = run_pipeline(input.as_bytes(), &mut out, &PipelineConfig::default(), &NoopRecognizer).unwrap();
        assert_eq!(report.parse_errors, 1);
        assert_eq!(report.records_out, 2);
        assert_eq!(report.records_in, report.records_out + report.parse_errors);

        let strict = PipelineConfig { strict: true, ..PipelineConfig::default() };
        let mut out = Vec::new();
        assert!(run_pipeline(input.as_bytes(), &mut out, &strict, &NoopRecognizer).is_err());
    }

    #[test]
    fn passes_apply_in_order_and_stamp_provenance() {
        let input = record(
            "Alice ran through the dark forest quickly",
            "The phrase 'ran through the dark forest' is evocative, Alice shines",
        );
        let mut out = Vec::new();
        run_pipeline(input.as_bytes(), &mut out, &PipelineConfig::default(), &HeuristicRecognizer::new()).unwrap();
        let pair: PassageCritiquePair = serde_json::from_str(String::from_utf8(out).unwrap().trim()).unwrap();
        assert!(pair.critique.contains("[quote]"), "critique: {}", pair.critique);
        assert!(pair.critique.contains("John0"), "critique: {}", pair.critique);
        assert!(pair.passage.contains("John0"));
        assert_eq!(pair.provenance, vec!["mask_quotes", "anonymize"]);
    }

    #[test]
    fn counts_always_reconcile() {
        let input = [
            record("a passage with enough text", "great critique with detail"),
            record("short", "long enough critique text"),
            record("a passage with enough text", "meh"),
            "garbage line".to_string(),
        ]
        .join("\n");
        let mut out = Vec::new();
        let report = run_pipeline(input.as_bytes(), &mut out, &PipelineConfig::default(), &NoopRecognizer).unwrap();
        assert_eq!(
            report.records_in,
            report.records_out + report.dropped_short_passage + report.dropped_short_critique + report.parse_errors
        );
    }

    #[test]
    fn emitted_pairs_satisfy_masking_and_length_invariants() {
        let inputs: Vec<String> = (0..20)
            .map(|i| {
                record(
                    &format!("the quick brown fox jumps over the lazy dog number {}", i),
                    &format!("my favourite part is 'the quick brown fox jumps' honestly {}", i),
                )
            })
            .collect();
        let mut out = Vec::new();
        run_pipeline(inputs.join("\n").as_bytes(), &mut out, &PipelineConfig::default(), &HeuristicRecognizer::new()).unwrap();
        for line in String::from_utf8(out).unwrap().lines() {
            let pair: PassageCritiquePair = serde_json::from_str(line).unwrap();
            assert!(longest_shared_run_len(&pair.passage, &pair.critique) < DEFAULT_MASK_THRESHOLD);
            assert!(pair.passage.chars().count() >= MIN_FIELD_CHARS);
            assert!(pair.critique.chars().count() >= MIN_FIELD_CHARS);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let input = [
            record("Alice met Bob by the river bank", "Alice and Bob feel flat here, 'by the river bank' drags"),
            record("the storm rolled in over the hills", "atmospheric, though 'rolled in over the hills' is quoted"),
        ]
        .join("\n");
        let run = || {
            let mut out = Vec::new();
            run_pipeline(input.as_bytes(), &mut out, &PipelineConfig::default(), &HeuristicRecognizer::new()).unwrap();
            String::from_utf8(out).unwrap()
        };
        assert_eq!(run(), run());
    }
}
