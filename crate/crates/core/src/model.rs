//! Dual-encoder model: two structurally identical transformer towers, one per
//! modality, pooled by masked sum, projected into a shared encoding space,
//! and compared by temperature-scaled cosine similarity.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamContainer, Tape, Tensor};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenBatch, Vocabulary};

pub const LN_EPS: f32 = 1e-5;
pub const L2_EPS: f32 = 1e-8;
/// The learned temperature is stored as a log and clamped to [ln(1/100), ln(100)].
pub fn log_scale_bounds() -> (f32, f32) {
    let hi = (100.0f32).ln();
    (-hi, hi)
}
/// Initial log scale. Zero (plain cosine similarity) keeps the loss at
/// random init near ln(n); larger inits amplify the similarity spread of
/// small randomly initialized towers and break that property.
fn log_scale_init() -> f32 {
    0.0
}

const INIT_STD: f32 = 0.02;
const KEY_MASK_BIAS: f32 = -1e9;

fn default_context_length() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_model_dim() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_encoding_dim() -> usize {
    64
}
fn default_feedforward_dim() -> usize {
    256
}
fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_context_length")]
    pub context_length: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_encoding_dim")]
    pub encoding_dim: usize,
    #[serde(default = "default_feedforward_dim")]
    pub feedforward_dim: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_length: default_context_length(),
            layers: default_layers(),
            model_dim: default_model_dim(),
            heads: default_heads(),
            encoding_dim: default_encoding_dim(),
            feedforward_dim: default_feedforward_dim(),
            seed: default_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.layers == 0 || self.encoding_dim == 0 {
            return Err(Error::InvalidArgument("vocab_size, layers and encoding_dim must be positive".into()));
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::InvalidArgument("context_length must be at least 2".into()));
        }
        if self.feedforward_dim == 0 {
            return Err(Error::InvalidArgument("feedforward_dim must be positive".into()));
        }
        Ok(())
    }

    /// Analytic parameter count; must match the allocated count exactly.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let ff = self.feedforward_dim;
        let per_block = 2 * d      // ln1 gain+bias
            + 4 * d * d            // wq, wk, wv, wo
            + 2 * d                // ln2 gain+bias
            + d * ff + ff          // ffn in + bias
            + ff * d + d;          // ffn out + bias
        let tower = self.vocab_size * d        // token embeddings
            + self.context_length * d          // positional embeddings
            + self.layers * per_block
            + 2 * d                            // final layer norm
            + d * self.encoding_dim;           // projection (no bias)
        2 * tower + 1 // both towers + log scale
    }
}

struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    ffn_in: Tensor,
    ffn_in_bias: Tensor,
    ffn_out: Tensor,
    ffn_out_bias: Tensor,
}

pub struct EncoderTower {
    token_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    final_gain: Tensor,
    final_bias: Tensor,
    proj: Tensor,
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f32, n: usize) -> Vec<f32> {
    // Box-Muller; f64 intermediates keep the tails clean.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (z as f32) * std
        })
        .collect()
}

fn normal_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(sample_normal(rng, INIT_STD, n), shape).expect("shape/data agree")
}

fn ones_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(vec![1.0; n], shape).expect("shape/data agree")
}

fn zeros_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(vec![0.0; n], shape).expect("shape/data agree")
}

impl Block {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let ff = cfg.feedforward_dim;
        Block {
            ln1_gain: ones_param(&[d]),
            ln1_bias: zeros_param(&[d]),
            wq: normal_param(rng, &[d, d]),
            wk: normal_param(rng, &[d, d]),
            wv: normal_param(rng, &[d, d]),
            wo: normal_param(rng, &[d, d]),
            ln2_gain: ones_param(&[d]),
            ln2_bias: zeros_param(&[d]),
            ffn_in: normal_param(rng, &[d, ff]),
            ffn_in_bias: zeros_param(&[ff]),
            ffn_out: normal_param(rng, &[ff, d]),
            ffn_out_bias: zeros_param(&[d]),
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor, key_bias: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
        let heads = cfg.heads;
        let head_dim = cfg.model_dim / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let normed = tape.layer_norm(x, &self.ln1_gain, &self.ln1_bias, LN_EPS)?;
        let q = linear_3d(tape, &normed, &self.wq)?;
        let k = linear_3d(tape, &normed, &self.wk)?;
        let v = linear_3d(tape, &normed, &self.wv)?;

        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_last(&q, h * head_dim, head_dim)?;
            let kh = tape.slice_last(&k, h * head_dim, head_dim)?;
            let vh = tape.slice_last(&v, h * head_dim, head_dim)?;
            let scores = tape.scale(&tape.bmm_nt(&qh, &kh)?, scale)?;
            let masked = tape.add(&scores, key_bias)?;
            let probs = tape.softmax_rows(&masked)?;
            per_head.push(tape.bmm(&probs, &vh)?);
        }
        let head_refs: Vec<&Tensor> = per_head.iter().collect();
        let merged = tape.concat_last(&head_refs)?;
        let attended = linear_3d(tape, &merged, &self.wo)?;
        let x = tape.add(x, &attended)?;

        let normed = tape.layer_norm(&x, &self.ln2_gain, &self.ln2_bias, LN_EPS)?;
        let hidden = tape.add_bias(&linear_3d(tape, &normed, &self.ffn_in)?, &self.ffn_in_bias)?;
        let hidden = tape.gelu(&hidden)?;
        let ffn = tape.add_bias(&linear_3d(tape, &hidden, &self.ffn_out)?, &self.ffn_out_bias)?;
        tape.add(&x, &ffn)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let list = [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ffn_in", &self.ffn_in),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out", &self.ffn_out),
            ("ffn_out_bias", &self.ffn_out_bias),
        ];
        for (name, t) in list {
            out.push((format!("{}.{}", prefix, name), t.clone()));
        }
    }
}

/// Apply `w[d_in, d_out]` to every token position of `x[b, t, d_in]`.
fn linear_3d(tape: &Tape, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (b, t, d_in) = (s[0], s[1], s[2]);
    let d_out = w.shape()[1];
    let flat = tape.reshape(x, &[b * t, d_in])?;
    let out = tape.matmul(&flat, w)?;
    tape.reshape(&out, &[b, t, d_out])
}

impl EncoderTower {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        EncoderTower {
            token_emb: normal_param(rng, &[cfg.vocab_size, d]),
            pos_emb: normal_param(rng, &[cfg.context_length, d]),
            blocks: (0..cfg.layers).map(|_| Block::init(cfg, rng)).collect(),
            final_gain: ones_param(&[d]),
            final_bias: zeros_param(&[d]),
            proj: normal_param(rng, &[d, cfg.encoding_dim]),
        }
    }

    /// Forward pass to unit-norm encoding-space rows `[rows, encoding_dim]`.
    pub fn encode(&self, tape: &Tape, batch: &TokenBatch, cfg: &ModelConfig) -> Result<Tensor> {
        if batch.context() != cfg.context_length {
            return Err(Error::shape(
                "encode",
                format!("batch context {} != model context {}", batch.context(), cfg.context_length),
            ));
        }
        let (b, t, d) = (batch.rows(), batch.context(), cfg.model_dim);

        let x = tape.embedding(&self.token_emb, batch.ids())?; // [b*t, d]
        let x = tape.reshape(&x, &[b, t * d])?;
        let pos = tape.reshape(&self.pos_emb, &[t * d])?;
        let x = tape.add_bias(&x, &pos)?;
        let mut x = tape.reshape(&x, &[b, t, d])?;

        let key_bias = attention_key_bias(batch);
        for block in &self.blocks {
            x = block.forward(tape, &x, &key_bias, cfg)?;
        }
        let x = tape.layer_norm(&x, &self.final_gain, &self.final_bias, LN_EPS)?;

        let pooled = tape.masked_sum(&x, &batch.mask_tensor())?;
        let pooled = tape.l2_normalize(&pooled, L2_EPS)?;
        let projected = tape.matmul(&pooled, &self.proj)?;
        tape.l2_normalize(&projected, L2_EPS)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.token_emb", prefix), self.token_emb.clone()));
        out.push((format!("{}.pos_emb", prefix), self.pos_emb.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.params(&format!("{}.block{}", prefix, i), out);
        }
        out.push((format!("{}.final_gain", prefix), self.final_gain.clone()));
        out.push((format!("{}.final_bias", prefix), self.final_bias.clone()));
        out.push((format!("{}.proj", prefix), self.proj.clone()));
    }
}

/// Additive attention bias excluding padded key positions: 0 where the key is
/// real, a large negative number where it is padding. After max subtraction
/// the masked scores underflow to exactly zero weight.
fn attention_key_bias(batch: &TokenBatch) -> Tensor {
    let (b, t) = (batch.rows(), batch.context());
    let mut data = vec![0.0f32; b * t * t];
    for i in 0..b {
        let mask = batch.row_mask(i);
        for q in 0..t {
            for k in 0..t {
                if mask[k] == 0 {
                    data[(i * t + q) * t + k] = KEY_MASK_BIAS;
                }
            }
        }
    }
    Tensor::new(data, &[b, t, t]).expect("bias shape consistent")
}

pub struct DualEncoder {
    config: ModelConfig,
    passage_tower: EncoderTower,
    critique_tower: EncoderTower,
    log_scale: Tensor,
}

impl DualEncoder {
    /// Random initialization, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let passage_tower = EncoderTower::init(&config, &mut rng);
        let critique_tower = EncoderTower::init(&config, &mut rng);
        let (lo, hi) = log_scale_bounds();
        let init = log_scale_init().clamp(lo, hi);
        let log_scale = Tensor::param(vec![init], &[1])?;
        Ok(DualEncoder { config, passage_tower, critique_tower, log_scale })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encode_passages(&self, tape: &Tape, batch: &TokenBatch) -> Result<Tensor> {
        self.passage_tower.encode(tape, batch, &self.config)
    }

    pub fn encode_critiques(&self, tape: &Tape, batch: &TokenBatch) -> Result<Tensor> {
        self.critique_tower.encode(tape, batch, &self.config)
    }

    /// `logits[i,j] = exp(log_scale) * <P_i, C_j>` over unit-norm rows.
    pub fn logits(&self, tape: &Tape, passages: &Tensor, critiques: &Tensor) -> Result<Tensor> {
        let (sp, sc) = (passages.shape(), critiques.shape());
        if sp.len() != 2 || sc.len() != 2 || sp[1] != sc[1] {
            return Err(Error::shape("logits", format!("{:?} vs {:?}", sp, sc)));
        }
        let sims = tape.matmul(passages, &tape.transpose2d(critiques)?)?;
        let scale = tape.exp(&self.log_scale)?;
        tape.scale_by(&sims, &scale)
    }

    pub fn log_scale(&self) -> &Tensor {
        &self.log_scale
    }

    pub fn log_scale_value(&self) -> f32 {
        self.log_scale.to_vec()[0]
    }

    /// Clamp the log scale into its stability interval. Called after every
    /// optimizer step.
    pub fn clamp_log_scale(&self) {
        let (lo, hi) = log_scale_bounds();
        self.log_scale.with_data_mut(|d| d[0] = d[0].clamp(lo, hi));
    }

    /// All learnable parameters with stable names.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.passage_tower.params("passage", &mut out);
        self.critique_tower.params("critique", &mut out);
        out.push(("log_scale".to_string(), self.log_scale.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.params() {
            t.zero_grad();
        }
    }

    pub fn allocated_param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub const CHECKPOINT_FORMAT: &str = "dual-encoder-checkpoint-v1";

/// Self-contained checkpoint: parameters plus the model config and the
/// vocabulary the parameters were trained against.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocab: BTreeMap<String, u32>,
    pub params: ParamContainer,
}

impl Checkpoint {
    pub fn capture(model: &DualEncoder, vocab: &Vocabulary) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config().clone(),
            vocab: vocab.token_map().clone(),
            params: ParamContainer::from_named(&model.params()),
        }
    }

    pub fn restore(&self) -> Result<(DualEncoder, Vocabulary)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format '{}'", self.format)));
        }
        let vocab = Vocabulary::from_map(self.vocab.clone())?;
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Data(format!(
                "vocabulary has {} tokens but config says {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let model = DualEncoder::new(self.config.clone())?;
        self.params.load_into(&model.params())?;
        Ok((model, vocab))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{self, Vocabulary};

    fn setup() -> (DualEncoder, Vocabulary) {
        let vocab = Vocabulary::build(["the quick brown fox jumps over the lazy dog again and again"], 32).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            context_length: 8,
            layers: 2,
            model_dim: 16,
            heads: 2,
            encoding_dim: 12,
            feedforward_dim: 32,
            seed: 99,
        };
        (DualEncoder::new(cfg).unwrap(), vocab)
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (model, vocab) = setup();
        let batch = tokenizer::encode_batch(["the quick brown fox", "lazy dog"], &vocab, 8).unwrap();
        let tape = Tape::no_grad();
        let emb = model.encode_passages(&tape, &batch).unwrap();
        let d = model.config().encoding_dim;
        for r in 0..2 {
            let row = &emb.to_vec()[r * d..(r + 1) * d];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "row {} norm {}", r, norm);
        }
    }

    #[test]
    fn duplicated_rows_encode_identically() {
        let (model, vocab) = setup();
        let batch = tokenizer::encode_batch(["the quick brown fox", "the quick brown fox"], &vocab, 8).unwrap();
        let tape = Tape::no_grad();
        let emb = model.encode_passages(&tape, &batch).unwrap().to_vec();
        let d = model.config().encoding_dim;
        assert_eq!(emb[..d], emb[d..2 * d]);
    }

    #[test]
    fn pad_invariance_against_unpadded_forward() {
        // Oracle: encode the same 4-token text once at context 4 (no padding)
        // and once at context 8 (four appended pads), using models that share
        // every parameter (the longer positional table extends the shorter
        // one). The embeddings must agree.
        let vocab = Vocabulary::build(["alpha beta gamma delta epsilon zeta"], 32).unwrap();
        let mut cfg8 = ModelConfig::toy(vocab.len());
        cfg8.context_length = 8;
        cfg8.model_dim = 16;
        cfg8.heads = 2;
        cfg8.encoding_dim = 12;
        cfg8.feedforward_dim = 32;
        cfg8.seed = 7;
        let mut cfg4 = cfg8.clone();
        cfg4.context_length = 4;

        let model8 = DualEncoder::new(cfg8).unwrap();
        let model4 = DualEncoder::new(cfg4).unwrap();
        for (name, t4) in model4.params() {
            let (_, t8) = model8.params().into_iter().find(|(n, _)| *n == name).unwrap();
            let src = t8.to_vec();
            t4.with_data_mut(|d| d.copy_from_slice(&src[..d.len()]));
        }

        let tape = Tape::no_grad();
        let unpadded = tokenizer::encode_batch(["alpha beta gamma delta"], &vocab, 4).unwrap();
        let padded = tokenizer::encode_batch(["alpha beta gamma delta"], &vocab, 8).unwrap();
        assert_eq!(padded.row_mask(0), &[1, 1, 1, 1, 0, 0, 0, 0]);

        let a = model4.encode_passages(&tape, &unpadded).unwrap().to_vec();
        let b = model8.encode_passages(&tape, &padded).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "padded {} vs unpadded {}", y, x);
        }
    }

    #[test]
    fn towers_are_independent() {
        let (model, vocab) = setup();
        let batch = tokenizer::encode_batch(["the quick brown fox"], &vocab, 8).unwrap();
        let tape = Tape::no_grad();
        let p = model.encode_passages(&tape, &batch).unwrap().to_vec();
        let c = model.encode_critiques(&tape, &batch).unwrap().to_vec();
        let diff: f32 = p.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "separate towers should embed differently at random init");
    }

    #[test]
    fn logits_scale_and_symmetry() {
        let (model, _) = setup();
        let tape = Tape::no_grad();

        let v = Tensor::new(vec![1.0, 0.0, 0.0], &[1, 3]).unwrap();
        model.log_scale.with_data_mut(|d| d[0] = 0.0);
        let l = model.logits(&tape, &v, &v).unwrap();
        assert!((l.to_vec()[0] - 1.0).abs() < 1e-6);

        let orth = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]).unwrap();
        let l = model.logits(&tape, &orth, &orth).unwrap().to_vec();
        assert!(l[1].abs() < 1e-6 && l[2].abs() < 1e-6);

        model.log_scale.with_data_mut(|d| d[0] = (100.0f32).ln());
        let l = model.logits(&tape, &v, &v).unwrap();
        assert!((l.to_vec()[0] - 100.0).abs() < 1e-3);

        // (P, P) logits are symmetric with exp(log_scale) on the diagonal.
        let (model2, vocab2) = setup();
        let batch = tokenizer::encode_batch(["the quick brown", "lazy dog again"], &vocab2, 8).unwrap();
        let emb = model2.encode_passages(&tape, &batch).unwrap();
        let l = model2.logits(&tape, &emb, &emb).unwrap().to_vec();
        let s = model2.log_scale_value().exp();
        assert!((l[0] - s).abs() < 1e-4 && (l[3] - s).abs() < 1e-4);
        assert!((l[1] - l[2]).abs() < 1e-4);
    }

    #[test]
    fn clamp_log_scale_hits_interval_endpoints() {
        let (model, _) = setup();
        let bound = (100.0f32).ln();

        model.log_scale.with_data_mut(|d| d[0] = 5.0);
        model.clamp_log_scale();
        assert!((model.log_scale_value() - bound).abs() < 1e-6);

        model.log_scale.with_data_mut(|d| d[0] = -5.0);
        model.clamp_log_scale();
        assert!((model.log_scale_value() + bound).abs() < 1e-6);

        model.log_scale.with_data_mut(|d| d[0] = 0.3);
        model.clamp_log_scale();
        assert!((model.log_scale_value() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn parameter_count_formula_matches_allocation() {
        let (model, _) = setup();
        assert_eq!(model.config().param_count(), model.allocated_param_count());

        let cfg = ModelConfig {
            vocab_size: 11,
            context_length: 5,
            layers: 3,
            model_dim: 8,
            heads: 2,
            encoding_dim: 6,
            feedforward_dim: 10,
            seed: 1,
        };
        let m = DualEncoder::new(cfg.clone()).unwrap();
        assert_eq!(cfg.param_count(), m.allocated_param_count());
    }

    #[test]
    fn encode_is_deterministic_for_fixed_seed() {
        let (m1, vocab) = setup();
        let (m2, _) = setup();
        let batch = tokenizer::encode_batch(["the quick brown fox"], &vocab, 8).unwrap();
        let tape = Tape::no_grad();
        let a = m1.encode_passages(&tape, &batch).unwrap().to_vec();
        let b = m2.encode_passages(&tape, &batch).unwrap().to_vec();
        assert_eq!(a, b, "same seed must give bitwise-identical embeddings");
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, vocab) = setup();
        let ck = Checkpoint::capture(&model, &vocab);
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let (restored, rvocab) = back.restore().unwrap();

        let batch = tokenizer::encode_batch(["the quick brown fox"], &vocab, 8).unwrap();
        let tape = Tape::no_grad();
        let a = model.encode_passages(&tape, &batch).unwrap().to_vec();
        let b = restored.encode_passages(&tape, &batch).unwrap().to_vec();
        assert_eq!(a, b);
        assert_eq!(rvocab.len(), vocab.len());
    }

    #[test]
    fn checkpoint_rejects_mismatched_config() {
        let (model, vocab) = setup();
        let mut ck = Checkpoint::capture(&model, &vocab);
        ck.config.model_dim = 32;
        assert!(ck.restore().is_err());
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig::toy(10);
        cfg.model_dim = 10;
        cfg.heads = 4;
        assert!(cfg.validate().is_err());
        assert!(DualEncoder::new(cfg).is_err());
    }
}
