//! Shared fixtures for the integration suites: synthetic corpora, the
//! brute-force quote oracle, and a finite-difference gradient oracle. These
//! stay independent of the library's own implementations on purpose.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Aligned pairs where every critique token is a fixed bijective mapping of
/// the passage token at the same position ("storyK" -> "critK"). Retrieval
/// is fully determined, so a model that learns the mapping can pair them.
pub fn synth_pairs(n: usize, words_per: usize, base_words: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let idx: Vec<usize> = (0..words_per).map(|_| rng.gen_range(0..base_words)).collect();
            let passage: Vec<String> = idx.iter().map(|i| format!("story{}", i)).collect();
            let critique: Vec<String> = idx.iter().map(|i| format!("crit{}", i)).collect();
            (passage.join(" "), critique.join(" "))
        })
        .collect()
}

/// Every distinct token of a pair corpus (for vocabulary building).
pub fn corpus_lines(pairs: &[(String, String)]) -> Vec<String> {
    pairs.iter().map(|(p, c)| format!("{} {}", p, c)).collect()
}

/// Normalize a text to its word list the way the quote rules see it:
/// lowercase alphanumeric runs, `[quote]` tokens removed.
pub fn oracle_words(text: &str) -> Vec<String> {
    text.replace("[quote]", " ")
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Brute force: longest word window of `critique` that appears contiguously
/// in `passage`. Quadratic on purpose; this is the independent oracle.
pub fn oracle_longest_shared_run(passage: &str, critique: &str) -> usize {
    let p = oracle_words(passage);
    let c = oracle_words(critique);
    let mut best = 0;
    for s in 0..c.len() {
        for e in (s + 1)..=c.len() {
            let window = &c[s..e];
            if window.len() > p.len() {
                break;
            }
            let found = (0..=p.len() - window.len()).any(|i| &p[i..i + window.len()] == window);
            if found {
                best = best.max(e - s);
            }
        }
    }
    best
}

/// Central finite differences of a scalar function of one flat buffer.
pub fn finite_diff(f: &mut dyn FnMut(&[f32]) -> f32, x: &[f32], h: f32) -> Vec<f32> {
    let mut grad = vec![0.0f32; x.len()];
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let hi = f(&buf);
        buf[i] = orig - h;
        let lo = f(&buf);
        buf[i] = orig;
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

pub fn max_grad_deviation(analytic: &[f32], numeric: &[f32], rtol: f32, atol: f32) -> f32 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f32;
    for (a, n) in analytic.iter().zip(numeric) {
        let tol = atol + rtol * a.abs().max(n.abs());
        let excess = (a - n).abs() - tol;
        worst = worst.max(excess);
    }
    worst
}
