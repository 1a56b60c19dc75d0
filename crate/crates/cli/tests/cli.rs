use std::path::Path;
use std::process::{Command, Output};

use dsc_core::data::load_dataset;
use dsc_core::decoding::{write_predictions, PredictionRecord};
use dsc_core::metrics::references_from_dataset;

fn dsc(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dsc"));
    c.current_dir(dir).args(args).env_remove("DSC_SEED");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = dsc(dir, args, &[]);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

const TRAIN: &[&str] = &[
    "train",
    "--data",
    "d.jsonl",
    "--profile",
    "desk",
    "--epochs",
    "1",
    "--out",
];

#[test]
fn single_checkpoint_ensemble_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsc(
        dir.path(),
        &[
            "ensemble-generate",
            "--checkpoint",
            "a.ckpt",
            "--data",
            "d",
            "--out",
            "o",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.jsonl"), "{not json\n").unwrap();
    let o = dsc(dir.path(), &[TRAIN, &["m.ckpt"]].concat(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--seed", "2", "--n", "5", "--out", "d.jsonl"]);
    let refs = references_from_dataset(&load_dataset(d.join("d.jsonl")).unwrap());
    let preds: Vec<PredictionRecord> = refs
        .iter()
        .map(|r| PredictionRecord {
            boundary_id: r.boundary_id.clone(),
            subject: r.captions.subject[0].clone(),
            before: r.captions.before[0].clone(),
            after: r.captions.after[0].clone(),
        })
        .collect();
    std::fs::write(d.join("p.jsonl"), write_predictions(&preds).unwrap()).unwrap();
    ok(
        d,
        &[
            "evaluate",
            "--predictions",
            "p.jsonl",
            "--data",
            "d.jsonl",
            "--out",
            "r.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["rouge_l"]["average"], 1.0);
    assert_eq!(report["corpus_size"], 5);
}

#[test]
fn manifest_replays_the_run_and_env_seed_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--seed", "4", "--n", "4", "--out", "d.jsonl"]);
    ok(d, &[TRAIN, &["a.ckpt", "--seed", "9"]].concat());
    ok(
        d,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--config",
            "a.ckpt.manifest.json",
            "--out",
            "b.ckpt",
        ],
    );
    let o = dsc(d, &[TRAIN, &["c.ckpt"]].concat(), &[("DSC_SEED", "9")]);
    assert!(o.status.success());
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt"), read("c.ckpt"));
    let m: serde_json::Value = serde_json::from_slice(&read("a.ckpt.manifest.json")).unwrap();
    assert_eq!(m["seeds"]["seed"], 9);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn generate_writes_one_prediction_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--seed", "6", "--n", "3", "--out", "d.jsonl"]);
    ok(d, &[TRAIN, &["m.ckpt"]].concat());
    ok(
        d,
        &[
            "generate",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "d.jsonl",
            "--out",
            "p.jsonl",
            "--max-len",
            "4",
        ],
    );
    let text = std::fs::read_to_string(d.join("p.jsonl")).unwrap();
    let preds = dsc_core::decoding::parse_predictions(&text).unwrap();
    assert_eq!(preds.len(), 3);
    assert!(preds.iter().all(|p| p.after.split_whitespace().count() <= 4));
}
