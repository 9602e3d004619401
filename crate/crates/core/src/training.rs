//! Symmetric contrastive training with chunked gradient accumulation.
//!
//! The chunked step embeds the whole contrastive batch without gradients
//! first, then re-encodes one chunk at a time with recording enabled, splices
//! the live rows into the cached embedding matrices, and backpropagates the
//! full-batch loss. Accumulated parameter gradients equal the full-batch
//! gradients exactly (up to f32 noise), while live activations stay bounded
//! by one chunk's forward pass.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DualEncoder};
use crate::tokenizer::{self, TokenBatch, Vocabulary};

fn default_batch_size() -> usize {
    32
}
fn default_chunk_size() -> usize {
    8
}
fn default_steps() -> usize {
    200
}
fn default_validation_interval() -> usize {
    50
}
fn default_learning_rate() -> f32 {
    1e-3
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}
fn default_val_size() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_validation_interval")]
    pub validation_interval: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Error on mid-step dataset exhaustion instead of wrapping the epoch.
    #[serde(default)]
    pub strict_epochs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 || self.chunk_size > self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "chunk_size {} must be in 1..={}",
                self.chunk_size, self.batch_size
            )));
        }
        if !self.batch_size.is_multiple_of(self.chunk_size) {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} must be divisible by chunk_size {}",
                self.batch_size, self.chunk_size
            )));
        }
        if self.steps == 0 || self.validation_interval == 0 {
            return Err(Error::InvalidArgument("steps and validation_interval must be positive".into()));
        }
        Ok(())
    }
}

/// `0.5 * (row-wise CE + column-wise CE)` with diagonal targets.
pub fn contrastive_loss(tape: &Tape, logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("contrastive_loss", format!("expected square logits, got {:?}", s)));
    }
    let targets: Vec<usize> = (0..s[0]).collect();
    let rows = tape.cross_entropy_rows(logits, &targets)?;
    let cols = tape.cross_entropy_rows(&tape.transpose2d(logits)?, &targets)?;
    tape.scale(&tape.add(&rows, &cols)?, 0.5)
}

/// Adam with decoupled weight decay. Moment buffers are keyed by tensor id.
pub struct AdamW {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    steps_taken: u64,
    moments: HashMap<u64, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            steps_taken: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over every parameter that has a gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (_, p) in params {
            let Some(grad) = p.grad() else { continue };
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
                }
            });
        }
    }
}

/// Forward + backward for the full batch on one tape; gradients are left in
/// the parameter buffers (accumulating onto whatever is already there).
pub fn accumulate_full_gradients(model: &DualEncoder, passages: &TokenBatch, critiques: &TokenBatch) -> Result<f32> {
    if passages.rows() != critiques.rows() {
        return Err(Error::shape(
            "train_step",
            format!("{} passages vs {} critiques", passages.rows(), critiques.rows()),
        ));
    }
    let tape = Tape::new();
    let p = model.encode_passages(&tape, passages)?;
    let c = model.encode_critiques(&tape, critiques)?;
    let logits = model.logits(&tape, &p, &c)?;
    let loss = contrastive_loss(&tape, &logits)?;
    tape.backward(&loss)?;
    loss.item()
}

pub struct CachedGradReport {
    pub loss: f32,
    /// Largest node count of any single chunk tape: the instrumentation for
    /// the chunk-bounded-memory property.
    pub peak_tape_nodes: usize,
}

/// Two-pass chunked gradient accumulation.
///
/// Pass 1 embeds every row without recording. Pass 2 re-encodes chunk `k`
/// of both modalities with recording, splices its live rows into the cached
/// matrices, and backpropagates the full n-by-n loss. The logit-scale
/// gradient appears once per chunk, so it is rescaled by `chunk/n` to match
/// the full-batch gradient before any optimizer update.
pub fn accumulate_cached_gradients(
    model: &DualEncoder,
    passages: &TokenBatch,
    critiques: &TokenBatch,
    chunk: usize,
) -> Result<CachedGradReport> {
    let n = passages.rows();
    if critiques.rows() != n {
        return Err(Error::shape(
            "train_step_cached",
            format!("{} passages vs {} critiques", n, critiques.rows()),
        ));
    }
    if chunk == 0 || chunk > n || !n.is_multiple_of(chunk) {
        return Err(Error::InvalidArgument(format!(
            "chunk size {} must divide batch size {}",
            chunk, n
        )));
    }
    let num_chunks = n / chunk;
    let dim = model.config().encoding_dim;

    let mut p_cache = Vec::with_capacity(n * dim);
    let mut c_cache = Vec::with_capacity(n * dim);
    for k in 0..num_chunks {
        let tape = Tape::no_grad();
        let pb = passages.slice_rows(k * chunk, chunk)?;
        let cb = critiques.slice_rows(k * chunk, chunk)?;
        p_cache.extend_from_slice(&model.encode_passages(&tape, &pb)?.to_vec());
        c_cache.extend_from_slice(&model.encode_critiques(&tape, &cb)?.to_vec());
    }
    let cached_p = Tensor::new(p_cache, &[n, dim])?;
    let cached_c = Tensor::new(c_cache, &[n, dim])?;

    let mut loss_value = 0.0;
    let mut peak_tape_nodes = 0;
    for k in 0..num_chunks {
        let tape = Tape::new();
        let pb = passages.slice_rows(k * chunk, chunk)?;
        let cb = critiques.slice_rows(k * chunk, chunk)?;
        let live_p = model.encode_passages(&tape, &pb)?;
        let live_c = model.encode_critiques(&tape, &cb)?;
        let full_p = tape.splice_rows(&cached_p, &live_p, k * chunk)?;
        let full_c = tape.splice_rows(&cached_c, &live_c, k * chunk)?;
        let logits = model.logits(&tape, &full_p, &full_c)?;
        let loss = contrastive_loss(&tape, &logits)?;
        if k == 0 {
            loss_value = loss.item()?;
        }
        tape.backward(&loss)?;
        peak_tape_nodes = peak_tape_nodes.max(tape.node_count());
    }
    model.log_scale().scale_grad(chunk as f32 / n as f32);

    Ok(CachedGradReport { loss: loss_value, peak_tape_nodes })
}

pub struct TrainState {
    pub model: DualEncoder,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: DualEncoder, cfg: &TrainConfig) -> Self {
        TrainState { model, optimizer: AdamW::new(cfg), step: 0 }
    }

    /// Reference single-tape step: forward, backward, update, clamp.
    /// Returns the pre-update loss.
    pub fn train_step_full(&mut self, passages: &TokenBatch, critiques: &TokenBatch) -> Result<f32> {
        self.model.zero_grads();
        let loss = accumulate_full_gradients(&self.model, passages, critiques)?;
        let params = self.model.params();
        self.optimizer.step(&params);
        self.model.clamp_log_scale();
        self.step += 1;
        Ok(loss)
    }

    /// Chunked step; gradient-equivalent to `train_step_full`.
    pub fn train_step_cached(&mut self, passages: &TokenBatch, critiques: &TokenBatch, chunk: usize) -> Result<f32> {
        self.model.zero_grads();
        let report = accumulate_cached_gradients(&self.model, passages, critiques, chunk)?;
        let params = self.model.params();
        self.optimizer.step(&params);
        self.model.clamp_log_scale();
        self.step += 1;
        Ok(report.loss)
    }
}

/// Pre-encoded aligned pairs, one row per (passage, critique).
pub struct EncodedPairs {
    passages: TokenBatch,
    critiques: TokenBatch,
}

impl EncodedPairs {
    pub fn new(passages: TokenBatch, critiques: TokenBatch) -> Result<Self> {
        if passages.rows() != critiques.rows() {
            return Err(Error::shape("encoded_pairs", "modalities have different row counts"));
        }
        Ok(EncodedPairs { passages, critiques })
    }

    pub fn from_texts<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        vocab: &Vocabulary,
        context: usize,
    ) -> Result<Self> {
        let mut p_rows = Vec::new();
        let mut c_rows = Vec::new();
        for (p, c) in pairs {
            let pb = tokenizer::encode(p, vocab, context)?;
            let cb = tokenizer::encode(c, vocab, context)?;
            p_rows.push((pb.row_ids(0).to_vec(), pb.row_mask(0).to_vec()));
            c_rows.push((cb.row_ids(0).to_vec(), cb.row_mask(0).to_vec()));
        }
        if p_rows.is_empty() {
            return Err(Error::degenerate("encoded_pairs", "no pairs"));
        }
        EncodedPairs::new(TokenBatch::from_rows(p_rows, context)?, TokenBatch::from_rows(c_rows, context)?)
    }

    pub fn len(&self) -> usize {
        self.passages.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn passages(&self) -> &TokenBatch {
        &self.passages
    }

    pub fn critiques(&self) -> &TokenBatch {
        &self.critiques
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(TokenBatch, TokenBatch)> {
        Ok((self.passages.select(indices)?, self.critiques.select(indices)?))
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<EncodedPairs> {
        EncodedPairs::new(self.passages.slice_rows(start, len)?, self.critiques.slice_rows(start, len)?)
    }
}

/// Without-replacement batch index stream, reshuffled each epoch.
pub struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    strict: bool,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, strict: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::degenerate("batch_sampler", "empty dataset"));
        }
        let mut sampler = BatchSampler { n, order: Vec::new(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed), strict };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(size);
        if self.pos == self.n {
            self.reshuffle();
        }
        while out.len() < size {
            if self.pos == self.n {
                if self.strict {
                    return Err(Error::Data(format!(
                        "dataset exhausted mid-step ({} of {} indices drawn)",
                        out.len(),
                        size
                    )));
                }
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Holdout metrics: full V-by-V contrastive loss and both-direction
/// diagonal-argmax retrieval accuracy.
pub fn validate(model: &DualEncoder, holdout: &EncodedPairs) -> Result<(f32, f32)> {
    let v = holdout.len();
    if v < 2 {
        return Err(Error::degenerate("validate", "holdout needs at least 2 pairs"));
    }
    let dim = model.config().encoding_dim;
    let sub = 32usize;
    let mut p_data = Vec::with_capacity(v * dim);
    let mut c_data = Vec::with_capacity(v * dim);
    let mut start = 0;
    while start < v {
        let len = sub.min(v - start);
        let tape = Tape::no_grad();
        let pb = holdout.passages().slice_rows(start, len)?;
        let cb = holdout.critiques().slice_rows(start, len)?;
        p_data.extend_from_slice(&model.encode_passages(&tape, &pb)?.to_vec());
        c_data.extend_from_slice(&model.encode_critiques(&tape, &cb)?.to_vec());
        start += len;
    }
    let tape = Tape::no_grad();
    let p = Tensor::new(p_data, &[v, dim])?;
    let c = Tensor::new(c_data, &[v, dim])?;
    let logits = model.logits(&tape, &p, &c)?;
    let loss = contrastive_loss(&tape, &logits)?.item()?;

    let lv = logits.to_vec();
    let mut row_hits = 0usize;
    let mut col_hits = 0usize;
    for i in 0..v {
        let row = &lv[i * v..(i + 1) * v];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(j, _)| j)
            .unwrap();
        if argmax == i {
            row_hits += 1;
        }
    }
    for j in 0..v {
        let mut best = f32::NEG_INFINITY;
        let mut arg = 0;
        for i in 0..v {
            if lv[i * v + j] > best {
                best = lv[i * v + j];
                arg = i;
            }
        }
        if arg == j {
            col_hits += 1;
        }
    }
    let accuracy = (row_hits + col_hits) as f32 / (2 * v) as f32;
    Ok((loss, accuracy))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_accuracy: f32,
    pub log_scale: f32,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// When set, `train_log.jsonl` and periodic checkpoints land here.
    pub out_dir: Option<&'a Path>,
    /// Vocabulary embedded into checkpoints; required when `out_dir` is set.
    pub vocab: Option<&'a Vocabulary>,
}

/// Run the chunked training loop, validating and checkpointing every
/// `validation_interval` steps. Fully reproducible from config + seed.
pub fn fit(state: &mut TrainState, train: &EncodedPairs, holdout: &EncodedPairs, cfg: &TrainConfig, opts: &FitOptions) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if opts.out_dir.is_some() && opts.vocab.is_none() {
        return Err(Error::InvalidArgument("fit: out_dir requires a vocabulary for checkpoints".into()));
    }
    let mut sampler = BatchSampler::new(train.len(), cfg.seed, cfg.strict_epochs)?;
    let mut log = Vec::new();
    let mut log_file = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };

    for step in 1..=cfg.steps {
        let indices = sampler.next_batch(cfg.batch_size)?;
        let (pb, cb) = train.gather(&indices)?;
        let train_loss = state.train_step_cached(&pb, &cb, cfg.chunk_size)?;

        if step % cfg.validation_interval == 0 || step == cfg.steps {
            let (val_loss, val_accuracy) = validate(&state.model, holdout)?;
            let row = LogRow {
                step: step as u64,
                train_loss,
                val_loss,
                val_accuracy,
                log_scale: state.model.log_scale_value(),
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&row)?)?;
            }
            if let (Some(dir), Some(vocab)) = (opts.out_dir, opts.vocab) {
                let ck = Checkpoint::capture(&state.model, vocab);
                ck.save(&dir.join(format!("checkpoint-{:06}.json", step)))?;
            }
            log.push(row);
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let (Some(dir), Some(vocab)) = (opts.out_dir, opts.vocab) {
        Checkpoint::capture(&state.model, vocab).save(&dir.join("checkpoint-final.json"))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_setup(seed: u64) -> (DualEncoder, Vocabulary) {
        let vocab = Vocabulary::build(
            ["one two three four five six seven eight nine ten alpha beta gamma delta"],
            64,
        )
        .unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            context_length: 6,
            layers: 1,
            model_dim: 8,
            heads: 2,
            encoding_dim: 8,
            feedforward_dim: 16,
            seed,
        };
        (DualEncoder::new(cfg).unwrap(), vocab)
    }

    fn tiny_pairs(vocab: &Vocabulary, n: usize, context: usize) -> EncodedPairs {
        let words = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
        let pairs: Vec<(String, String)> = (0..n)
            .map(|i| {
                let a = words[i % words.len()];
                let b = words[(i * 3 + 1) % words.len()];
                (format!("{} {} alpha", a, b), format!("beta {} {}", b, a))
            })
            .collect();
        EncodedPairs::from_texts(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())), vocab, context).unwrap()
    }

    #[test]
    fn contrastive_loss_uniform_logits_is_ln_n() {
        let tape = Tape::no_grad();
        let logits = Tensor::zeros(&[4, 4]);
        let loss = contrastive_loss(&tape, &logits).unwrap().item().unwrap();
        assert!((loss - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn contrastive_loss_dominant_diagonal_is_near_zero() {
        let tape = Tape::no_grad();
        let n = 4;
        let mut data = vec![-100.0f32; n * n];
        for i in 0..n {
            data[i * n + i] = 100.0;
        }
        let loss = contrastive_loss(&tape, &Tensor::new(data, &[n, n]).unwrap()).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-6, "got {}", loss);
    }

    #[test]
    fn contrastive_loss_is_transpose_symmetric() {
        let tape = Tape::no_grad();
        let data: Vec<f32> = (0..16).map(|i| ((i * 7 + 3) % 11) as f32 / 10.0).collect();
        let l = Tensor::new(data, &[4, 4]).unwrap();
        let lt = tape.transpose2d(&l).unwrap();
        let a = contrastive_loss(&tape, &l).unwrap().item().unwrap();
        let b = contrastive_loss(&tape, &lt).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn contrastive_loss_rejects_non_square() {
        let tape = Tape::no_grad();
        assert!(contrastive_loss(&tape, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn initial_loss_is_near_ln_n() {
        let (model, vocab) = tiny_setup(5);
        let pairs = tiny_pairs(&vocab, 8, 6);
        let tape = Tape::no_grad();
        let p = model.encode_passages(&tape, pairs.passages()).unwrap();
        let c = model.encode_critiques(&tape, pairs.critiques()).unwrap();
        let logits = model.logits(&tape, &p, &c).unwrap();
        let loss = contrastive_loss(&tape, &logits).unwrap().item().unwrap();
        let target = (8.0f32).ln();
        assert!(
            loss > 0.85 * target && loss < 1.15 * target,
            "init loss {} vs ln(8) {}",
            loss,
            target
        );
    }

    #[test]
    fn cached_gradients_match_full_gradients() {
        let (model, vocab) = tiny_setup(13);
        let pairs = tiny_pairs(&vocab, 8, 6);

        model.zero_grads();
        let full_loss = accumulate_full_gradients(&model, pairs.passages(), pairs.critiques()).unwrap();
        let full: Vec<(String, Vec<f32>)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect();

        for chunk in [1usize, 2, 4, 8] {
            model.zero_grads();
            let report = accumulate_cached_gradients(&model, pairs.passages(), pairs.critiques(), chunk).unwrap();
            assert!((report.loss - full_loss).abs() < 1e-5, "chunk {} loss {} vs {}", chunk, report.loss, full_loss);
            for ((name, want), (_, t)) in full.iter().zip(model.params().iter()) {
                let got = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                for (i, (w, g)) in want.iter().zip(&got).enumerate() {
                    let tol = 1e-6 + 1e-4 * w.abs().max(g.abs());
                    assert!(
                        (w - g).abs() <= tol,
                        "chunk {}: {}[{}] full {} vs cached {}",
                        chunk, name, i, w, g
                    );
                }
            }
        }
    }

    #[test]
    fn cached_step_rejects_non_dividing_chunk() {
        let (model, vocab) = tiny_setup(3);
        let pairs = tiny_pairs(&vocab, 6, 6);
        assert!(accumulate_cached_gradients(&model, pairs.passages(), pairs.critiques(), 4).is_err());
    }

    #[test]
    fn train_step_keeps_log_scale_in_bounds() {
        let (model, vocab) = tiny_setup(21);
        let cfg = TrainConfig { batch_size: 4, chunk_size: 2, learning_rate: 0.5, ..TrainConfig::default() };
        let mut state = TrainState::new(model, &cfg);
        let pairs = tiny_pairs(&vocab, 4, 6);
        let bound = (100.0f32).ln();
        for _ in 0..5 {
            state.train_step_cached(pairs.passages(), pairs.critiques(), 2).unwrap();
            let v = state.model.log_scale_value();
            assert!((-bound..=bound).contains(&v), "log_scale {} out of bounds", v);
        }
    }

    #[test]
    fn adamw_first_step_magnitude_is_learning_rate() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        p.accumulate_grad(&[0.3]);
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg);
        opt.step(&[("p".into(), p.clone())]);
        // First Adam step moves by ~lr in the gradient direction.
        let moved = 1.0 - p.item().unwrap();
        assert!((moved - 0.01).abs() < 1e-4, "moved {}", moved);
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epoch() {
        let mut a = BatchSampler::new(10, 7, false).unwrap();
        let mut b = BatchSampler::new(10, 7, false).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch(4).unwrap(), b.next_batch(4).unwrap());
        }

        let mut s = BatchSampler::new(6, 1, false).unwrap();
        let mut seen: Vec<usize> = s.next_batch(6).unwrap();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn strict_sampler_errors_mid_step() {
        let mut s = BatchSampler::new(6, 1, true).unwrap();
        assert!(s.next_batch(4).is_ok());
        assert!(s.next_batch(4).is_err(), "second batch crosses the epoch boundary mid-step");

        // Clean epoch boundaries are fine in strict mode.
        let mut s = BatchSampler::new(6, 1, true).unwrap();
        assert!(s.next_batch(6).is_ok());
        assert!(s.next_batch(6).is_ok());
    }

    #[test]
    fn validate_returns_chance_level_for_random_model() {
        let (model, vocab) = tiny_setup(31);
        let pairs = tiny_pairs(&vocab, 10, 6);
        let (loss, acc) = validate(&model, &pairs).unwrap();
        assert!(loss.is_finite());
        assert!((0.0..=1.0).contains(&acc));
    }

    fn mapped_pairs(n: usize, seed: u64) -> (EncodedPairs, Vocabulary) {
        // Critique tokens are a fixed bijection of passage tokens, so the
        // batch is fully memorizable.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(String, String)> = (0..n)
            .map(|_| {
                let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..20)).collect();
                let p: Vec<String> = idx.iter().map(|i| format!("story{}", i)).collect();
                let c: Vec<String> = idx.iter().map(|i| format!("crit{}", i)).collect();
                (p.join(" "), c.join(" "))
            })
            .collect();
        let lines: Vec<String> = pairs.iter().map(|(p, c)| format!("{} {}", p, c)).collect();
        let vocab = Vocabulary::build(lines.iter().map(|s| s.as_str()), 256).unwrap();
        let encoded =
            EncodedPairs::from_texts(pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())), &vocab, 8).unwrap();
        (encoded, vocab)
    }

    #[test]
    fn full_steps_halve_the_loss_on_a_memorizable_batch() {
        let (pairs, vocab) = mapped_pairs(8, 7);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            context_length: 8,
            layers: 2,
            model_dim: 32,
            heads: 4,
            encoding_dim: 32,
            feedforward_dim: 64,
            seed: 3,
        };
        let tcfg = TrainConfig { learning_rate: 2e-3, ..TrainConfig::default() };
        let mut state = TrainState::new(DualEncoder::new(cfg).unwrap(), &tcfg);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..200 {
            let loss = state.train_step_full(pairs.passages(), pairs.critiques()).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(
            last < 0.5 * first,
            "loss failed to halve over 200 steps: {} -> {}",
            first,
            last
        );
    }

    #[test]
    fn cached_chunk_tapes_do_not_grow_with_batch_size() {
        // The per-chunk tape holds one chunk's encoder graph plus the fixed
        // loss graph, so its node count must not depend on n for fixed c.
        let (model, vocab) = tiny_setup(2);
        let small = tiny_pairs(&vocab, 8, 6);
        let large = tiny_pairs(&vocab, 32, 6);

        model.zero_grads();
        let small_report =
            accumulate_cached_gradients(&model, small.passages(), small.critiques(), 4).unwrap();
        model.zero_grads();
        let large_report =
            accumulate_cached_gradients(&model, large.passages(), large.critiques(), 4).unwrap();
        assert_eq!(
            small_report.peak_tape_nodes, large_report.peak_tape_nodes,
            "chunk tape grew with n: {} vs {}",
            small_report.peak_tape_nodes, large_report.peak_tape_nodes
        );
        assert!(small_report.peak_tape_nodes > 0);
    }

    #[test]
    fn fit_is_deterministic() {
        let run = || {
            let (model, vocab) = tiny_setup(77);
            let cfg = TrainConfig {
                batch_size: 4,
                chunk_size: 2,
                steps: 6,
                validation_interval: 3,
                seed: 9,
                ..TrainConfig::default()
            };
            let train = tiny_pairs(&vocab, 8, 6);
            let holdout = tiny_pairs(&vocab, 4, 6);
            let mut state = TrainState::new(model, &cfg);
            fit(&mut state, &train, &holdout, &cfg, &FitOptions::default()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.windows(2).all(|w| w[0].step < w[1].step), "log steps must increase");
        assert!(a.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
    }
}
