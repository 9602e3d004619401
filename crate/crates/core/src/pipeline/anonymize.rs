//! Entity anonymization: replace recognized names with indexed generic ones.
//!
//! The recognizer is pluggable; the default is a capitalized-token heuristic
//! with a first-names dictionary and exact-string cluster merging. Passage
//! and critique share one cluster map per record, so the same entity gets
//! the same replacement in both.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// A recognized entity occurrence: byte span plus a stable cluster key.
/// Mentions with equal keys are the same entity.
#[derive(Debug, Clone)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub cluster: String,
}

pub trait EntityRecognizer {
    fn recognize(&self, text: &str) -> Vec<EntityMention>;
}

/// Recognizer that finds nothing; disables anonymization.
pub struct NoopRecognizer;

impl EntityRecognizer for NoopRecognizer {
    fn recognize(&self, _text: &str) -> Vec<EntityMention> {
        Vec::new()
    }
}

pub fn default_name_pool() -> Vec<String> {
    ["John", "Sam", "Alex", "Taylor", "Jordan"].iter().map(|s| s.to_string()).collect()
}

const FIRST_NAMES: &[&str] = &[
    "Alice", "Amelia", "Anna", "Ava", "Bob", "Brian", "Charlie", "Chloe", "Daniel", "David",
    "Diana", "Ella", "Emily", "Emma", "Ethan", "Eva", "Finn", "George", "Grace", "Harry",
    "Henry", "Iris", "Isla", "Jack", "James", "Jane", "John", "Jordan", "Kate", "Karen",
    "Kevin", "Laura", "Leo", "Liam", "Lisa", "Lucas", "Lucy", "Luna", "Mary", "Max",
    "Mia", "Michael", "Nancy", "Noah", "Nora", "Oliver", "Olivia", "Owen", "Paul", "Peter",
    "Rose", "Ruby", "Ryan", "Sam", "Sarah", "Sophia", "Susan", "Taylor", "Tom", "Zoe",
];

const CAPITALIZED_STOPWORDS: &[&str] = &[
    "The", "A", "An", "I", "It", "He", "She", "They", "We", "You", "But", "And", "Or", "So",
    "Then", "When", "While", "After", "Before", "If", "As", "At", "On", "In", "My", "His",
    "Her", "Their", "Our", "Its", "This", "That", "These", "Those", "There", "Here", "What",
    "Why", "How", "Who", "Not", "No", "Yes", "Oh", "Well", "Now", "Once", "Mr", "Mrs", "Ms",
    "Dr", "To", "For", "From", "With", "By", "Of", "Is", "Was", "Were", "Are", "Be", "Do",
    "Did", "Maybe", "Also", "Just", "Even", "Every", "Some", "Any", "All", "Both", "Each",
];

/// Capitalized-token heuristic: a `Xxxx` word counts as an entity if it is a
/// known first name, or if it appears mid-sentence and is not a common
/// capitalized function word. Clusters merge on the exact token string.
pub struct HeuristicRecognizer {
    names: HashSet<&'static str>,
    stopwords: HashSet<&'static str>,
}

impl HeuristicRecognizer {
    pub fn new() -> Self {
        HeuristicRecognizer {
            names: FIRST_NAMES.iter().copied().collect(),
            stopwords: CAPITALIZED_STOPWORDS.iter().copied().collect(),
        }
    }
}

impl Default for HeuristicRecognizer {
    fn default() -> Self {
        Self::new()
    }
}

impl EntityRecognizer for HeuristicRecognizer {
    fn recognize(&self, text: &str) -> Vec<EntityMention> {
        let mut mentions = Vec::new();
        let mut sentence_start = true;
        let mut i = 0;
        while i < text.len() {
            let c = text[i..].chars().next().expect("in bounds");
            if c.is_alphanumeric() {
                let start = i;
                let mut end = i;
                for ch in text[i..].chars() {
                    if ch.is_alphanumeric() {
                        end += ch.len_utf8();
                    } else {
                        break;
                    }
                }
                let word = &text[start..end];
                // Tokens with digits (including earlier John0-style output)
                // are never entities.
                if looks_capitalized(word) {
                    let is_name = self.names.contains(word);
                    let mid_sentence_proper = !sentence_start && !self.stopwords.contains(word);
                    if is_name || mid_sentence_proper {
                        mentions.push(EntityMention { start, end, cluster: word.to_string() });
                    }
                }
                sentence_start = false;
                i = end;
            } else {
                if matches!(c, '.' | '!' | '?' | '\n') {
                    sentence_start = true;
                }
                i += c.len_utf8();
            }
        }
        mentions
    }
}

fn looks_capitalized(word: &str) -> bool {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) if first.is_uppercase() => chars.clone().count() >= 1 && chars.all(|c| c.is_lowercase()),
        _ => false,
    }
}

fn validate_spans(text: &str, mentions: &[EntityMention]) -> Result<()> {
    let mut sorted: Vec<&EntityMention> = mentions.iter().collect();
    sorted.sort_by_key(|m| m.start);
    let mut prev_end = 0usize;
    for m in sorted {
        if m.start >= m.end || m.end > text.len() || !text.is_char_boundary(m.start) || !text.is_char_boundary(m.end) {
            return Err(Error::Data(format!("entity span {}..{} is out of bounds", m.start, m.end)));
        }
        if m.start < prev_end {
            return Err(Error::Data(format!("overlapping entity spans at byte {}", m.start)));
        }
        prev_end = m.end;
    }
    Ok(())
}

/// Replace entities across several texts that share one cluster map. Cluster
/// `k` (by first appearance over the texts in order) becomes
/// `pool[k % pool.len()]` suffixed with `k`.
pub fn anonymize_texts(texts: &[&str], recognizer: &dyn EntityRecognizer, name_pool: &[String]) -> Result<Vec<String>> {
    if name_pool.is_empty() {
        return Err(Error::InvalidArgument("name pool must not be empty".into()));
    }
    let per_text: Vec<Vec<EntityMention>> = texts.iter().map(|t| recognizer.recognize(t)).collect();
    for (text, mentions) in texts.iter().zip(&per_text) {
        validate_spans(text, mentions)?;
    }

    let mut cluster_index: HashMap<String, usize> = HashMap::new();
    for mentions in &per_text {
        let mut ordered: Vec<&EntityMention> = mentions.iter().collect();
        ordered.sort_by_key(|m| m.start);
        for m in ordered {
            let next = cluster_index.len();
            cluster_index.entry(m.cluster.clone()).or_insert(next);
        }
    }

    let mut out = Vec::with_capacity(texts.len());
    for (text, mentions) in texts.iter().zip(&per_text) {
        let mut replaced = text.to_string();
        let mut ordered: Vec<&EntityMention> = mentions.iter().collect();
        ordered.sort_by_key(|m| m.start);
        for m in ordered.into_iter().rev() {
            let k = cluster_index[&m.cluster];
            let name = format!("{}{}", name_pool[k % name_pool.len()], k);
            replaced.replace_range(m.start..m.end, &name);
        }
        out.push(replaced);
    }
    Ok(out)
}

/// Single-text anonymization.
pub fn anonymize(text: &str, recognizer: &dyn EntityRecognizer, name_pool: &[String]) -> Result<String> {
    Ok(anonymize_texts(&[text], recognizer, name_pool)?.remove(0))
}

/// Anonymize a (passage, critique) record with a shared cluster map.
pub fn anonymize_pair(
    passage: &str,
    critique: &str,
    recognizer: &dyn EntityRecognizer,
    name_pool: &[String],
) -> Result<(String, String)> {
    let mut texts = anonymize_texts(&[passage, critique], recognizer, name_pool)?;
    let critique = texts.pop().expect("two outputs");
    let passage = texts.pop().expect("two outputs");
    Ok((passage, critique))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_names_follow_first_appearance_order() {
        let rec = HeuristicRecognizer::new();
        let out = anonymize("Alice met Bob. Alice waved.", &rec, &default_name_pool()).unwrap();
        assert_eq!(out, "John0 met Sam1. John0 waved.");
    }

    #[test]
    fn text_without_entities_is_unchanged() {
        let rec = HeuristicRecognizer::new();
        let text = "it was raining outside, so he stayed in.";
        assert_eq!(anonymize(text, &rec, &default_name_pool()).unwrap(), text);
    }

    #[test]
    fn pair_shares_the_cluster_map() {
        let rec = HeuristicRecognizer::new();
        let (p, c) = anonymize_pair(
            "Emma walked to the shore.",
            "Why does Emma leave so abruptly?",
            &rec,
            &default_name_pool(),
        )
        .unwrap();
        assert_eq!(p, "John0 walked to the shore.");
        assert_eq!(c, "Why does John0 leave so abruptly?");
    }

    #[test]
    fn distinct_clusters_never_collide() {
        // More clusters than pool entries: the numeric suffix keeps
        // replacements injective.
        let rec = HeuristicRecognizer::new();
        let text = "Alice Bob Emma Jane Lucy Mia Noah";
        let out = anonymize(text, &rec, &default_name_pool()).unwrap();
        let replacements: Vec<&str> = out.split_whitespace().collect();
        let unique: HashSet<&&str> = replacements.iter().collect();
        assert_eq!(unique.len(), replacements.len(), "{:?}", replacements);
        assert!(out.contains("John0") && out.contains("John5"));
    }

    #[test]
    fn sentence_initial_stopwords_are_not_entities() {
        let rec = HeuristicRecognizer::new();
        let text = "The rain fell. It kept falling.";
        assert_eq!(anonymize(text, &rec, &default_name_pool()).unwrap(), text);
    }

    #[test]
    fn mid_sentence_proper_nouns_are_entities_even_off_dictionary() {
        let rec = HeuristicRecognizer::new();
        let out = anonymize("they drove to Ravenwood yesterday.", &rec, &default_name_pool()).unwrap();
        assert_eq!(out, "they drove to John0 yesterday.");
    }

    #[test]
    fn dictionary_names_are_recognized_at_sentence_start() {
        let rec = HeuristicRecognizer::new();
        let out = anonymize("Alice left early.", &rec, &default_name_pool()).unwrap();
        assert_eq!(out, "John0 left early.");
    }

    #[test]
    fn overlapping_spans_are_rejected() {
        struct Overlapping;
        impl EntityRecognizer for Overlapping {
            fn recognize(&self, _text: &str) -> Vec<EntityMention> {
                vec![
                    EntityMention { start: 0, end: 5, cluster: "a".into() },
                    EntityMention { start: 3, end: 8, cluster: "b".into() },
                ]
            }
        }
        assert!(anonymize("abcdefghij", &Overlapping, &default_name_pool()).is_err());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let rec = NoopRecognizer;
        assert!(anonymize("text", &rec, &[]).is_err());
    }

    #[test]
    fn replacements_do_not_retrigger_recognition() {
        // Pool names carry a numeric suffix, so a second pass is a no-op.
        let rec = HeuristicRecognizer::new();
        let once = anonymize("Alice met Bob.", &rec, &default_name_pool()).unwrap();
        let twice = anonymize(&once, &rec, &default_name_pool()).unwrap();
        assert_eq!(once, twice);
    }
}
