//! Quote masking: replace story text quoted inside a critique with `[quote]`.
//!
//! Matching happens on lowercased words with punctuation stripped; the match
//! must be contiguous in both texts. Replacement covers the original
//! character span of the matched words, so surrounding punctuation and the
//! rest of the critique keep their casing. Masking repeats until no common
//! run of at least `threshold` words remains, then adjacent mask tokens
//! collapse to one.

use crate::error::{Error, Result};
use crate::tokenizer::QUOTE_TOKEN;

/// A word occurrence: normalized form plus its byte span in the source text.
/// `matchable` is false for `[quote]` tokens, which never participate in
/// matching again.
#[derive(Debug, Clone)]
struct Word {
    norm: String,
    start: usize,
    end: usize,
    matchable: bool,
}

fn scan_words(text: &str) -> Vec<Word> {
    let bytes = text.as_bytes();
    let mut words = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if text[i..].starts_with(QUOTE_TOKEN) {
            words.push(Word {
                norm: QUOTE_TOKEN.to_string(),
                start: i,
                end: i + QUOTE_TOKEN.len(),
                matchable: false,
            });
            i += QUOTE_TOKEN.len();
            continue;
        }
        let c = match text[i..].chars().next() {
            Some(c) => c,
            None => break,
        };
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
            words.push(Word {
                norm: text[start..end].to_lowercase(),
                start,
                end,
                matchable: true,
            });
            i = end;
        } else {
            i += c.len_utf8();
        }
    }
    words
}

/// Longest run of words contiguous in both texts. Returns
/// `(critique_start_index, length)`; equal-length candidates resolve to the
/// leftmost critique position.
fn longest_common_run(passage: &[Word], critique: &[Word]) -> Option<(usize, usize)> {
    if passage.is_empty() || critique.is_empty() {
        return None;
    }
    let mut best_len = 0usize;
    let mut best_start = 0usize;
    // prev[i] = run length ending at passage[i-1] and the previous critique word.
    let mut prev = vec![0usize; passage.len() + 1];
    for (j, cw) in critique.iter().enumerate() {
        let mut cur = vec![0usize; passage.len() + 1];
        if cw.matchable {
            for (i, pw) in passage.iter().enumerate() {
                if pw.matchable && pw.norm == cw.norm {
                    cur[i + 1] = prev[i] + 1;
                    let len = cur[i + 1];
                    let start = j + 1 - len;
                    if len > best_len || (len == best_len && len > 0 && start < best_start) {
                        best_len = len;
                        best_start = start;
                    }
                }
            }
        }
        prev = cur;
    }
    (best_len > 0).then_some((best_start, best_len))
}

/// All non-overlapping occurrences of the normalized word sequence
/// `needle` within `words`, greedily left to right.
fn occurrences(words: &[Word], needle: &[String]) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    let mut i = 0;
    while i + needle.len() <= words.len() {
        let hit = words[i..i + needle.len()]
            .iter()
            .zip(needle)
            .all(|(w, n)| w.matchable && w.norm == *n);
        if hit {
            found.push((i, needle.len()));
            i += needle.len();
        } else {
            i += 1;
        }
    }
    found
}

fn collapse_adjacent_masks(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(QUOTE_TOKEN) {
        out.push_str(&rest[..pos]);
        out.push_str(QUOTE_TOKEN);
        rest = &rest[pos + QUOTE_TOKEN.len()..];
        // Swallow whitespace-separated repeats.
        loop {
            let trimmed = rest.trim_start();
            if let Some(after) = trimmed.strip_prefix(QUOTE_TOKEN) {
                rest = after;
            } else {
                break;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Replace every critique phrase sharing a contiguous word run of at least
/// `threshold` words with the passage by a single `[quote]` token.
pub fn mask_quotes(passage: &str, critique: &str, threshold: usize) -> Result<String> {
    if threshold < 2 {
        return Err(Error::InvalidArgument(format!("mask threshold must be at least 2, got {}", threshold)));
    }
    let passage_words = scan_words(passage);
    let mut current = critique.to_string();
    loop {
        let critique_words = scan_words(&current);
        let Some((start, len)) = longest_common_run(&passage_words, &critique_words) else {
            break;
        };
        if len < threshold {
            break;
        }
        let needle: Vec<String> = critique_words[start..start + len].iter().map(|w| w.norm.clone()).collect();
        let spans = occurrences(&critique_words, &needle);
        let mut next = current.clone();
        for (word_idx, n) in spans.into_iter().rev() {
            let byte_start = critique_words[word_idx].start;
            let byte_end = critique_words[word_idx + n - 1].end;
            next.replace_range(byte_start..byte_end, QUOTE_TOKEN);
        }
        current = next;
    }
    Ok(collapse_adjacent_masks(&current))
}

/// Independent check used by the pipeline invariants: length of the longest
/// word run shared by both texts (mask tokens excluded).
pub fn longest_shared_run_len(passage: &str, critique: &str) -> usize {
    longest_common_run(&scan_words(passage), &scan_words(critique))
        .map(|(_, len)| len)
        .unwrap_or(0)
}
