//! Deterministic corpus-built word-level tokenizer.
//!
//! Whitespace-split with punctuation broken out as separate tokens, lowercase
//! at tokenization time, and a reserved `[quote]` token that is never split.
//! Stands in for a pretrained subword tokenizer at desk scale.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const QUOTE_ID: u32 = 2;
pub const BOS_ID: u32 = 3;
pub const EOS_ID: u32 = 4;

pub const QUOTE_TOKEN: &str = "[quote]";
const SPECIALS: [&str; 5] = ["<pad>", "<unk>", QUOTE_TOKEN, "<bos>", "<eos>"];

/// Split text into lowercased word-level tokens. Alphanumeric runs become one
/// token, every punctuation character stands alone, and a literal `[quote]`
/// survives as a single token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '[' && chars[i..].iter().collect::<String>().starts_with(QUOTE_TOKEN) {
            tokens.push(QUOTE_TOKEN.to_string());
            i += QUOTE_TOKEN.len();
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    /// token -> id; a BTreeMap so serialized vocabularies are byte-stable.
    tokens: BTreeMap<String, u32>,
    #[serde(skip)]
    reverse: Vec<String>,
}

impl Vocabulary {
    /// Build from a token-frequency pass over the corpus: descending
    /// frequency, lexicographic tie-break, truncated to `max_size` entries
    /// including the five specials.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < SPECIALS.len() {
            return Err(Error::InvalidArgument(format!(
                "max_size {} cannot hold the {} special tokens",
                max_size,
                SPECIALS.len()
            )));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for line in corpus {
            for tok in tokenize(line) {
                if tok == QUOTE_TOKEN {
                    continue; // always mapped to the reserved id
                }
                saw_any = true;
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());

        let mut tokens = BTreeMap::new();
        for (i, s) in SPECIALS.iter().enumerate() {
            tokens.insert(s.to_string(), i as u32);
        }
        for (i, (tok, _)) in ranked.into_iter().enumerate() {
            tokens.insert(tok, (SPECIALS.len() + i) as u32);
        }
        let mut vocab = Vocabulary { tokens, reverse: Vec::new() };
        vocab.rebuild_reverse();
        Ok(vocab)
    }

    fn rebuild_reverse(&mut self) {
        let mut reverse = vec![String::new(); self.tokens.len()];
        for (tok, id) in &self.tokens {
            reverse[*id as usize] = tok.clone();
        }
        self.reverse = reverse;
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.tokens.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.reverse.get(id as usize).map(|s| s.as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let tokens: BTreeMap<String, u32> = serde_json::from_str(json)?;
        Self::from_map(tokens)
    }

    pub fn from_map(tokens: BTreeMap<String, u32>) -> Result<Self> {
        let mut seen = vec![false; tokens.len()];
        for id in tokens.values() {
            let idx = *id as usize;
            if idx >= tokens.len() || seen[idx] {
                return Err(Error::Data("vocabulary ids must be contiguous from 0 and unique".into()));
            }
            seen[idx] = true;
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(*s) != Some(&(i as u32)) {
                return Err(Error::Data(format!("special token '{}' must map to id {}", s, i)));
            }
        }
        let mut vocab = Vocabulary { tokens, reverse: Vec::new() };
        vocab.rebuild_reverse();
        Ok(vocab)
    }

    pub fn token_map(&self) -> &BTreeMap<String, u32> {
        &self.tokens
    }
}

/// Fixed-context batch of token ids with a 0/1 attention mask.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    ids: Vec<u32>,
    mask: Vec<u8>,
    rows: usize,
    context: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: Vec<(Vec<u32>, Vec<u8>)>, context: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len() * context);
        let mut mask = Vec::with_capacity(rows.len() * context);
        let n = rows.len();
        for (row_ids, row_mask) in rows {
            if row_ids.len() != context || row_mask.len() != context {
                return Err(Error::shape("token_batch", "row length differs from context"));
            }
            if !row_mask.contains(&1) {
                return Err(Error::degenerate("token_batch", "row has no unmasked tokens"));
            }
            for (id, m) in row_ids.iter().zip(&row_mask) {
                if *m == 0 && *id != PAD_ID {
                    return Err(Error::Data("masked positions must hold the pad id".into()));
                }
            }
            ids.extend_from_slice(&row_ids);
            mask.extend_from_slice(&row_mask);
        }
        Ok(TokenBatch { ids, mask, rows: n, context })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn row_ids(&self, row: usize) -> &[u32] {
        &self.ids[row * self.context..(row + 1) * self.context]
    }

    pub fn row_mask(&self, row: usize) -> &[u8] {
        &self.mask[row * self.context..(row + 1) * self.context]
    }

    /// Mask as an f32 tensor of shape `[rows, context]` for pooling.
    pub fn mask_tensor(&self) -> Tensor {
        let data: Vec<f32> = self.mask.iter().map(|m| *m as f32).collect();
        Tensor::new(data, &[self.rows, self.context]).expect("mask shape is consistent")
    }

    /// Select a subset of rows (used for chunked training).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices
            .iter()
            .map(|&i| {
                if i >= self.rows {
                    return Err(Error::InvalidArgument(format!("row index {} out of {}", i, self.rows)));
                }
                Ok((self.row_ids(i).to_vec(), self.row_mask(i).to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenBatch::from_rows(rows, self.context)
    }

    /// Contiguous rows `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.select(&indices)
    }
}

/// Encode one text into a single-row batch: tail truncation beyond `context`
/// tokens, tail padding below it, OOV mapped to `<unk>`.
pub fn encode(text: &str, vocab: &Vocabulary, context: usize) -> Result<TokenBatch> {
    if context < 2 {
        return Err(Error::InvalidArgument("context length must be at least 2".into()));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::degenerate("encode", "no tokens after tokenization"));
    }
    let mut ids = Vec::with_capacity(context);
    let mut mask = Vec::with_capacity(context);
    for tok in tokens.iter().take(context) {
        let id = if tok == QUOTE_TOKEN {
            QUOTE_ID
        } else {
            vocab.id_of(tok).unwrap_or(UNK_ID)
        };
        ids.push(id);
        mask.push(1);
    }
    while ids.len() < context {
        ids.push(PAD_ID);
        mask.push(0);
    }
    TokenBatch::from_rows(vec![(ids, mask)], context)
}

/// Encode many texts into one batch.
pub fn encode_batch<'a>(texts: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary, context: usize) -> Result<TokenBatch> {
    let mut rows = Vec::new();
    for text in texts {
        let single = encode(text, vocab, context)?;
        rows.push((single.row_ids(0).to_vec(), single.row_mask(0).to_vec()));
    }
    if rows.is_empty() {
        return Err(Error::degenerate("encode_batch", "no texts"));
    }
    TokenBatch::from_rows(rows, context)
}

/// Kept tokens of a row, skipping padding.
pub fn decode(batch: &TokenBatch, row: usize, vocab: &Vocabulary) -> Vec<String> {
    batch
        .row_ids(row)
        .iter()
        .zip(batch.row_mask(row))
        .filter(|(_, m)| **m == 1)
        .map(|(id, _)| vocab.token_of(*id).unwrap_or("<unk>").to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocabulary {
        Vocabulary::build(["hello world , good here the quick brown fox hello"], 64).unwrap()
    }

    #[test]
    fn build_orders_by_frequency_then_lexicographically() {
        let vocab = Vocabulary::build(["a a b"], 10).unwrap();
        assert_eq!(vocab.id_of("a"), Some(5));
        assert_eq!(vocab.id_of("b"), Some(6));

        // Equal frequency: lexicographic.
        let vocab = Vocabulary::build(["b a"], 10).unwrap();
        assert_eq!(vocab.id_of("a"), Some(5));
        assert_eq!(vocab.id_of("b"), Some(6));
    }

    #[test]
    fn build_is_deterministic() {
        let a = Vocabulary::build(["the quick brown fox the lazy dog"], 32).unwrap();
        let b = Vocabulary::build(["the quick brown fox the lazy dog"], 32).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn build_truncates_to_most_frequent() {
        let vocab = Vocabulary::build(["x x x y y z"], 6).unwrap();
        assert_eq!(vocab.len(), 6);
        assert_eq!(vocab.id_of("x"), Some(5));
        assert_eq!(vocab.id_of("y"), None);
    }

    #[test]
    fn build_rejects_empty_corpus() {
        assert!(Vocabulary::build(["   "], 10).is_err());
        let empty: Vec<&str> = vec![];
        assert!(Vocabulary::build(empty, 10).is_err());
    }

    #[test]
    fn encode_pads_and_masks_the_tail() {
        let vocab = small_vocab();
        let batch = encode("hello hello", &vocab, 4).unwrap();
        let h = vocab.id_of("hello").unwrap();
        assert_eq!(batch.row_ids(0), &[h, h, PAD_ID, PAD_ID]);
        assert_eq!(batch.row_mask(0), &[1, 1, 0, 0]);
    }

    #[test]
    fn encode_truncates_from_the_tail() {
        let vocab = small_vocab();
        let batch = encode("the quick brown fox hello world good here the quick", &vocab, 4).unwrap();
        assert_eq!(batch.row_mask(0), &[1, 1, 1, 1]);
        let expected: Vec<u32> = ["the", "quick", "brown", "fox"].iter().map(|t| vocab.id_of(t).unwrap()).collect();
        assert_eq!(batch.row_ids(0), expected.as_slice());
    }

    #[test]
    fn encode_maps_quote_literal_and_oov() {
        let vocab = small_vocab();
        let batch = encode("good [quote] here zzz", &vocab, 8).unwrap();
        let ids = batch.row_ids(0);
        assert_eq!(ids[1], QUOTE_ID);
        assert_eq!(ids[3], UNK_ID);
    }

    #[test]
    fn encode_rejects_empty_and_tiny_context() {
        let vocab = small_vocab();
        assert!(encode("", &vocab, 4).is_err());
        assert!(encode("hello", &vocab, 1).is_err());
    }

    #[test]
    fn round_trip_restores_kept_tokens() {
        let vocab = small_vocab();
        let batch = encode("Hello, World", &vocab, 8).unwrap();
        assert_eq!(decode(&batch, 0, &vocab), vec!["hello", ",", "world"]);
    }

    #[test]
    fn mask_sum_equals_min_of_len_and_context() {
        let vocab = small_vocab();
        for (text, context, want) in [("hello world", 8, 2), ("the quick brown fox hello", 3, 3)] {
            let batch = encode(text, &vocab, context).unwrap();
            let total: u32 = batch.row_mask(0).iter().map(|m| *m as u32).sum();
            assert_eq!(total, want);
        }
    }

    #[test]
    fn no_id_exceeds_vocab_size() {
        let vocab = Vocabulary::build(["tiny corpus"], 6).unwrap();
        let batch = encode("tiny corpus with many unknown words , ! ?", &vocab, 16).unwrap();
        assert!(batch.row_ids(0).iter().all(|id| (*id as usize) < vocab.len()));
    }

    #[test]
    fn vocab_json_round_trip() {
        let vocab = small_vocab();
        let json = vocab.to_json().unwrap();
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(back.id_of("hello"), vocab.id_of("hello"));
        assert_eq!(back.token_of(QUOTE_ID), Some(QUOTE_TOKEN));
    }

    #[test]
    fn from_map_rejects_broken_specials() {
        let mut map = small_vocab().token_map().clone();
        map.remove("<pad>");
        map.insert("shifted".into(), 0);
        assert!(Vocabulary::from_map(map).is_err());
    }
}
