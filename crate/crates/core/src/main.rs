//! Single entry point wiring the library into reproducible runs.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use critalign::error::{Error, Result};
use critalign::evaluation::{self, ExternalScores, HumanVotes, ScoreSource, Story};
use critalign::model::{Checkpoint, DualEncoder, ModelConfig};
use critalign::pipeline::{
    self, EntityRecognizer, HeuristicRecognizer, LexiconSentiment, LexiconToxicity, NoopRecognizer,
    PipelineConfig,
};
use critalign::tokenizer::Vocabulary;
use critalign::training::{self, EncodedPairs, FitOptions, TrainConfig, TrainState};
use critalign::zeroshot::{self, ClassifierSpec, StoryScorer};

#[derive(Parser)]
#[command(name = "critalign", version, about = "Contrastive passage/critique alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RecognizerChoice {
    Heuristic,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Mask quoted story text, anonymize names, and drop short records.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where the summary report goes (default: <out>.report.json).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Minimum shared word-run length that counts as a quote.
        #[arg(long, default_value_t = pipeline::DEFAULT_MASK_THRESHOLD)]
        threshold: usize,
        /// Fail on malformed JSONL lines instead of skipping them.
        #[arg(long)]
        strict: bool,
        #[arg(long, value_enum, default_value_t = RecognizerChoice::Heuristic)]
        recognizer: RecognizerChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Length/sentiment/toxicity statistics over preprocessed pairs.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Toxicity score above which a negative critique counts as toxic.
        #[arg(long, default_value_t = pipeline::DEFAULT_TOXICITY_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a word-level vocabulary from preprocessed pairs.
    BuildVocab {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        max_size: usize,
    },
    /// Train the dual encoder with the chunked contrastive step.
    Train {
        /// JSON file with optional "model" and "training" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Holdout loss and retrieval accuracy for a checkpoint.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cap on holdout pairs (default: all).
        #[arg(long)]
        val_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot label distribution for one story.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        story: PathBuf,
        #[arg(long, conflicts_with = "specs")]
        preset: Option<String>,
        /// JSON list of {label, variants}.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Order candidate reviews by similarity to a story.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        story: PathBuf,
        /// Candidate reviews, one per line.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare methods against human vote distributions.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON list of {story_id, text}.
        #[arg(long)]
        stories: PathBuf,
        /// JSON list of {story_id, labels, counts}.
        #[arg(long)]
        votes: PathBuf,
        #[arg(long, conflicts_with = "specs")]
        preset: Option<String>,
        #[arg(long)]
        specs: Option<PathBuf>,
        /// Extra methods from score files, as name=path. Repeatable.
        #[arg(long = "external", value_name = "NAME=PATH")]
        external: Vec<String>,
        /// Add an untrained random-embedding baseline method.
        #[arg(long)]
        random_baseline: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; fold every usage problem into 1.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { input, out, report, threshold, strict, recognizer, seed } => {
            let cfg = PipelineConfig {
                mask_threshold: threshold,
                strict,
                name_pool: pipeline::default_name_pool(),
            };
            let rec: Box<dyn EntityRecognizer> = match recognizer {
                RecognizerChoice::Heuristic => Box::new(HeuristicRecognizer::new()),
                RecognizerChoice::None => Box::new(NoopRecognizer),
            };
            let reader = BufReader::new(fs::File::open(&input)?);
            let writer = BufWriter::new(fs::File::create(&out)?);
            let summary = pipeline::run_pipeline(reader, writer, &cfg, rec.as_ref())?;
            let report_path = report.unwrap_or_else(|| suffixed(&out, ".report.json"));
            write_json(&report_path, &summary)?;
            echo_config(
                &suffixed(&out, ".config.json"),
                json!({
                    "command": "preprocess",
                    "in": input,
                    "out": out,
                    "threshold": threshold,
                    "strict": strict,
                    "recognizer": format!("{:?}", recognizer).to_lowercase(),
                    "seed": seed,
                }),
            )?;
            eprintln!(
                "preprocess: {} in, {} out, {:.2}% dropped",
                summary.records_in, summary.records_out, summary.dropped_percent
            );
            Ok(())
        }
        Command::Stats { input, out, threshold, seed } => {
            let pairs = pipeline::read_pairs(BufReader::new(fs::File::open(&input)?))?;
            let report = pipeline::corpus_stats(&pairs, &LexiconSentiment, &LexiconToxicity, threshold)?;
            write_json(&out, &report)?;
            echo_config(
                &suffixed(&out, ".config.json"),
                json!({
                    "command": "stats",
                    "in": input,
                    "out": out,
                    "threshold": threshold,
                    "seed": seed,
                }),
            )?;
            Ok(())
        }
        Command::BuildVocab { input, out, max_size } => {
            let pairs = pipeline::read_pairs(BufReader::new(fs::File::open(&input)?))?;
            let mut texts = Vec::with_capacity(pairs.len() * 2);
            for p in &pairs {
                texts.push(p.passage.as_str());
                texts.push(p.critique.as_str());
            }
            let vocab = Vocabulary::build(texts, max_size)?;
            fs::write(&out, vocab.to_json()?)?;
            echo_config(
                &suffixed(&out, ".config.json"),
                json!({
                    "command": "build-vocab",
                    "in": input,
                    "out": out,
                    "max_size": max_size,
                }),
            )?;
            eprintln!("build-vocab: {} tokens", vocab.len());
            Ok(())
        }
        Command::Train { config, data, vocab, out, seed } => {
            let vocab = Vocabulary::from_json(&fs::read_to_string(&vocab)?)?;
            let file_cfg: serde_json::Value = match &config {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => json!({}),
            };
            let seed = seed.unwrap_or_else(|| {
                file_cfg.get("seed").and_then(|v| v.as_u64()).unwrap_or(0)
            });

            let mut model_value = file_cfg.get("model").cloned().unwrap_or_else(|| json!({}));
            model_value["vocab_size"] = json!(vocab.len());
            model_value["seed"] = json!(seed);
            let model_cfg: ModelConfig = serde_json::from_value(model_value)?;

            let mut train_value = file_cfg.get("training").cloned().unwrap_or_else(|| json!({}));
            train_value["seed"] = json!(seed);
            let train_cfg: TrainConfig = serde_json::from_value(train_value)?;
            train_cfg.validate()?;

            let pairs = pipeline::read_pairs(BufReader::new(fs::File::open(&data)?))?;
            if pairs.len() < train_cfg.val_size + 2 {
                return Err(Error::Data(format!(
                    "{} pairs cannot supply a {}-pair holdout plus training data",
                    pairs.len(),
                    train_cfg.val_size
                )));
            }
            let encoded = EncodedPairs::from_texts(
                pairs.iter().map(|p| (p.passage.as_str(), p.critique.as_str())),
                &vocab,
                model_cfg.context_length,
            )?;
            let (train_set, holdout) = split_holdout(&encoded, train_cfg.val_size, seed)?;

            fs::create_dir_all(&out)?;
            echo_config(
                &out.join("effective_config.json"),
                json!({
                    "command": "train",
                    "data": data,
                    "vocab_tokens": vocab.len(),
                    "seed": seed,
                    "model": model_cfg,
                    "training": train_cfg,
                }),
            )?;

            let model = DualEncoder::new(model_cfg)?;
            let mut state = TrainState::new(model, &train_cfg);
            let opts = FitOptions { out_dir: Some(&out), vocab: Some(&vocab) };
            let log = training::fit(&mut state, &train_set, &holdout, &train_cfg, &opts)?;
            if let Some(last) = log.last() {
                eprintln!(
                    "train: step {} train_loss {:.4} val_loss {:.4} val_accuracy {:.4}",
                    last.step, last.train_loss, last.val_loss, last.val_accuracy
                );
            }
            Ok(())
        }
        Command::Validate { checkpoint, data, val_size, out } => {
            let (model, vocab) = Checkpoint::load(&checkpoint)?.restore()?;
            let pairs = pipeline::read_pairs(BufReader::new(fs::File::open(&data)?))?;
            let take = val_size.unwrap_or(pairs.len()).min(pairs.len());
            let encoded = EncodedPairs::from_texts(
                pairs.iter().take(take).map(|p| (p.passage.as_str(), p.critique.as_str())),
                &vocab,
                model.config().context_length,
            )?;
            let (val_loss, val_accuracy) = training::validate(&model, &encoded)?;
            let result = json!({
                "pairs": encoded.len(),
                "val_loss": val_loss,
                "val_accuracy": val_accuracy,
            });
            emit(out.as_deref(), &result)
        }
        Command::Classify { checkpoint, story, preset, specs, out } => {
            let (model, vocab) = Checkpoint::load(&checkpoint)?.restore()?;
            let story_text = fs::read_to_string(&story)?;
            let specs = load_specs(preset.as_deref(), specs.as_deref())?;
            let scorer = StoryScorer::new(&model, &vocab);
            let dist = scorer.classify(&story_text, &specs)?;
            emit(out.as_deref(), &serde_json::to_value(&dist)?)
        }
        Command::Rank { checkpoint, story, candidates, out } => {
            let (model, vocab) = Checkpoint::load(&checkpoint)?.restore()?;
            let story_text = fs::read_to_string(&story)?;
            let lines: Vec<String> = fs::read_to_string(&candidates)?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect();
            let scorer = StoryScorer::new(&model, &vocab);
            let ranked = scorer.rank_reviews(&story_text, &lines)?;
            let value = json!(ranked
                .iter()
                .map(|(review, cosine)| json!({ "review": review, "cosine": cosine }))
                .collect::<Vec<_>>());
            emit(out.as_deref(), &value)
        }
        Command::Evaluate {
            checkpoint,
            stories,
            votes,
            preset,
            specs,
            external,
            random_baseline,
            out,
            seed,
        } => {
            let (model, vocab) = Checkpoint::load(&checkpoint)?.restore()?;
            let stories_list: Vec<Story> = serde_json::from_str(&fs::read_to_string(&stories)?)?;
            let votes_list: Vec<HumanVotes> = serde_json::from_str(&fs::read_to_string(&votes)?)?;
            let specs_list = load_specs(preset.as_deref(), specs.as_deref())?;

            let mut reports = Vec::new();
            let scorer = StoryScorer::new(&model, &vocab);
            reports.push(evaluation::evaluate_suite(
                "model",
                &ScoreSource::Model(&scorer),
                &stories_list,
                &votes_list,
                &specs_list,
            )?);

            if random_baseline {
                let mut cfg = model.config().clone();
                cfg.seed = seed.wrapping_add(1);
                let random_model = DualEncoder::new(cfg)?;
                let random_scorer = StoryScorer::new(&random_model, &vocab);
                reports.push(evaluation::evaluate_suite(
                    "random",
                    &ScoreSource::Model(&random_scorer),
                    &stories_list,
                    &votes_list,
                    &specs_list,
                )?);
            }

            for spec in &external {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--external expects name=path, got '{}'", spec)))?;
                let rows: Vec<ExternalScores> = serde_json::from_str(&fs::read_to_string(path)?)?;
                reports.push(evaluation::evaluate_suite(
                    name,
                    &ScoreSource::External(&rows),
                    &stories_list,
                    &votes_list,
                    &specs_list,
                )?);
            }

            fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &reports)?;
            let mut rows_csv = BufWriter::new(fs::File::create(out.join("rows.csv"))?);
            evaluation::write_rows_csv(&reports, &mut rows_csv)?;
            rows_csv.flush()?;
            let mut summary_csv = BufWriter::new(fs::File::create(out.join("summary.csv"))?);
            evaluation::write_summary_csv(&reports, &mut summary_csv)?;
            summary_csv.flush()?;
            echo_config(
                &out.join("effective_config.json"),
                json!({
                    "command": "evaluate",
                    "checkpoint": checkpoint,
                    "stories": stories,
                    "votes": votes,
                    "preset": preset,
                    "external": external,
                    "random_baseline": random_baseline,
                    "seed": seed,
                }),
            )?;
            for r in &reports {
                eprintln!(
                    "evaluate[{}]: mean cosine {:.4}, mean KL {:.4}",
                    r.method, r.cosine_summary.mean, r.kl_summary.mean
                );
            }
            Ok(())
        }
    }
}

/// Deterministic seeded shuffle split: `val_size` holdout pairs, rest train.
fn split_holdout(encoded: &EncodedPairs, val_size: usize, seed: u64) -> Result<(EncodedPairs, EncodedPairs)> {
    let n = encoded.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (val_idx, train_idx) = order.split_at(val_size);
    let (vp, vc) = encoded.gather(val_idx)?;
    let (tp, tc) = encoded.gather(train_idx)?;
    Ok((EncodedPairs::new(tp, tc)?, EncodedPairs::new(vp, vc)?))
}

fn load_specs(preset: Option<&str>, path: Option<&Path>) -> Result<Vec<ClassifierSpec>> {
    let specs = match (preset, path) {
        (Some(name), None) => zeroshot::load_preset(name)?,
        (None, Some(p)) => serde_json::from_str(&fs::read_to_string(p)?)?,
        (None, None) => zeroshot::load_preset("nine-reviews")?,
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.push_str(suffix);
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn echo_config(path: &Path, value: serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

/// Print to stdout or write to a file, always with a trailing newline.
/// A consumer closing the pipe early (e.g. `| head`) ends the program
/// quietly instead of panicking.
fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            fs::write(path, format!("{}\n", text))?;
            Ok(())
        }
        None => {
            let mut stdout = std::io::stdout();
            match writeln!(stdout, "{}", text).and_then(|_| stdout.flush()) {
                Ok(()) => Ok(()),
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {
                    std::process::exit(0);
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}
