//! End-to-end CLI behavior: subcommand flows, exit codes, and the
//! no-input-mutation guarantee.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_critalign"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{}: expected exit {}, got {:?}\nstderr: {}",
        what,
        code,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_corpus(dir: &Path) {
    let pairs = common::synth_pairs(60, 8, 30, 9);
    let lines: Vec<String> = pairs
        .iter()
        .map(|(p, c)| serde_json::json!({ "passage": p, "critique": c }).to_string())
        .collect();
    fs::write(dir.join("raw.jsonl"), lines.join("\n")).unwrap();
}

fn prepare_checkpoint(dir: &Path) {
    write_corpus(dir);
    assert_code(
        &run(dir, &["preprocess", "--in", "raw.jsonl", "--out", "pairs.jsonl"]),
        0,
        "preprocess",
    );
    assert_code(
        &run(dir, &["build-vocab", "--in", "pairs.jsonl", "--out", "vocab.json"]),
        0,
        "build-vocab",
    );
    fs::write(
        dir.join("toy.json"),
        serde_json::json!({
            "model": {"context_length": 12, "layers": 1, "model_dim": 16, "heads": 2,
                       "encoding_dim": 16, "feedforward_dim": 32},
            "training": {"batch_size": 8, "chunk_size": 4, "steps": 8,
                          "validation_interval": 4, "val_size": 8}
        })
        .to_string(),
    )
    .unwrap();
    assert_code(
        &run(dir, &["train", "--config", "toy.json", "--data", "pairs.jsonl", "--vocab", "vocab.json", "--out", "run", "--seed", "3"]),
        0,
        "train",
    );
}

#[test]
fn full_subcommand_tour() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    prepare_checkpoint(dir);
    let ck = "run/checkpoint-final.json";

    // stats over the preprocessed pairs
    assert_code(&run(dir, &["stats", "--in", "pairs.jsonl", "--out", "stats.json"]), 0, "stats");
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["records"], serde_json::json!(60));
    assert_eq!(stats["toxicity_threshold"], serde_json::json!(0.01));

    // validate prints loss and accuracy
    let out = run(dir, &["validate", "--checkpoint", ck, "--data", "pairs.jsonl", "--val-size", "16"]);
    assert_code(&out, 0, "validate");
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pairs"], serde_json::json!(16));
    assert!(v["val_loss"].as_f64().unwrap().is_finite());

    // classify with a custom specs file
    fs::write(dir.join("story.txt"), "story1 story2 story3 story4\n").unwrap();
    fs::write(
        dir.join("specs.json"),
        serde_json::json!([
            {"label": "matching", "variants": ["crit1 crit2 crit3 crit4"]},
            {"label": "other", "variants": ["crit20 crit21", "crit22 crit23"]}
        ])
        .to_string(),
    )
    .unwrap();
    let out = run(dir, &["classify", "--checkpoint", ck, "--story", "story.txt", "--specs", "specs.json"]);
    assert_code(&out, 0, "classify");
    let dist: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let probs = dist["probabilities"].as_array().unwrap();
    assert_eq!(probs.len(), 2);
    let sum: f64 = probs.iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);

    // rank candidates from a plain text file
    fs::write(dir.join("candidates.txt"), "crit1 crit2 crit3\ncrit20 crit21 crit22\ncrit5 crit6 crit7\n").unwrap();
    let out = run(dir, &["rank", "--checkpoint", ck, "--story", "story.txt", "--candidates", "candidates.txt"]);
    assert_code(&out, 0, "rank");
    let ranked: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = ranked.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let cosines: Vec<f64> = rows.iter().map(|r| r["cosine"].as_f64().unwrap()).collect();
    assert!(cosines.windows(2).all(|w| w[0] >= w[1]), "not sorted: {:?}", cosines);
}

#[test]
fn inputs_are_never_mutated() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_corpus(dir);
    let raw_before = fs::read(dir.join("raw.jsonl")).unwrap();
    assert_code(&run(dir, &["preprocess", "--in", "raw.jsonl", "--out", "pairs.jsonl"]), 0, "preprocess");
    assert_eq!(raw_before, fs::read(dir.join("raw.jsonl")).unwrap());

    let pairs_before = fs::read(dir.join("pairs.jsonl")).unwrap();
    assert_code(&run(dir, &["build-vocab", "--in", "pairs.jsonl", "--out", "vocab.json"]), 0, "build-vocab");
    assert_code(&run(dir, &["stats", "--in", "pairs.jsonl", "--out", "stats.json"]), 0, "stats");
    assert_eq!(pairs_before, fs::read(dir.join("pairs.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&run(dir.path(), &["no-such-command"]), 1, "unknown subcommand");
    assert_code(&run(dir.path(), &["preprocess"]), 1, "missing required flags");
    assert_code(&run(dir.path(), &["train", "--bogus-flag"]), 1, "unknown flag");
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    assert_code(
        &run(dir, &["preprocess", "--in", "missing.jsonl", "--out", "x.jsonl"]),
        2,
        "missing input file",
    );

    fs::write(dir.join("bad.jsonl"), "this is not json\n").unwrap();
    assert_code(
        &run(dir, &["preprocess", "--in", "bad.jsonl", "--out", "x.jsonl", "--strict"]),
        2,
        "strict mode on malformed input",
    );

    // Unknown preset is a data problem, not a usage parse failure.
    prepare_checkpoint(dir);
    fs::write(dir.join("story.txt"), "story1 story2\n").unwrap();
    assert_code(
        &run(dir, &["classify", "--checkpoint", "run/checkpoint-final.json", "--story", "story.txt", "--preset", "seventeen-reviews"]),
        2,
        "unknown preset",
    );

    // chunk_size must divide batch_size
    fs::write(
        dir.join("badtrain.json"),
        serde_json::json!({"training": {"batch_size": 8, "chunk_size": 3, "steps": 2, "val_size": 8}}).to_string(),
    )
    .unwrap();
    assert_code(
        &run(dir, &["train", "--config", "badtrain.json", "--data", "pairs.jsonl", "--vocab", "vocab.json", "--out", "run2"]),
        2,
        "invalid chunking",
    );
}

#[test]
fn effective_config_echo_lands_next_to_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    prepare_checkpoint(dir);

    for echoed in ["pairs.jsonl.config.json", "vocab.json.config.json", "run/effective_config.json"] {
        let text = fs::read_to_string(dir.join(echoed)).unwrap_or_else(|_| panic!("missing {}", echoed));
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.get("command").is_some(), "{} lacks a command field", echoed);
    }
    // The train echo pins the full effective model and training config.
    let train_echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/effective_config.json")).unwrap()).unwrap();
    assert_eq!(train_echo["seed"], serde_json::json!(3));
    assert_eq!(train_echo["model"]["model_dim"], serde_json::json!(16));
    assert_eq!(train_echo["training"]["chunk_size"], serde_json::json!(4));
}

#[test]
fn train_then_validate_round_trips_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    prepare_checkpoint(dir);

    // Both the periodic and the final checkpoint load and validate.
    for ck in ["run/checkpoint-000004.json", "run/checkpoint-final.json"] {
        let out = run(dir, &["validate", "--checkpoint", ck, "--data", "pairs.jsonl", "--val-size", "8"]);
        assert_code(&out, 0, ck);
    }

    let log = fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> =
        log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2, "validation_interval 4 over 8 steps -> 2 log rows");
    for row in &rows {
        for key in ["step", "train_loss", "val_loss", "val_accuracy", "log_scale"] {
            assert!(row.get(key).is_some(), "log row missing {}", key);
        }
    }
}
