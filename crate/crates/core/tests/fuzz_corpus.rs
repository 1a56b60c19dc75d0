//! Replays the checked-in fuzz seeds through the same entry points, so the
//! corpus stays meaningful without a fuzzing toolchain.

use std::path::PathBuf;

use dsc_core::data::embeddings::parse_embeddings;
use dsc_core::data::parse_dataset;
use dsc_core::data::vocab::{normalize, Vocabulary};
use dsc_core::decoding::{parse_predictions, write_predictions};
use dsc_core::metrics::{parse_references, write_references};
use dsc_core::model::Checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn dataset_seeds() {
    for (name, b) in seeds("dataset") {
        let r = parse_dataset(text(&b));
        assert_eq!(r.is_ok(), name != "malformed", "{name}: {:?}", r.as_ref().err());
        if name == "header_only" {
            assert!(r.unwrap().samples.is_empty());
        }
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, b) in seeds("checkpoint") {
        match Checkpoint::from_bytes(&b) {
            Ok(ck) => {
                assert_eq!(name, "tiny");
                assert_eq!(ck.to_bytes().unwrap(), b);
            }
            Err(_) => assert_eq!(name, "truncated"),
        }
    }
}

#[test]
fn reference_and_prediction_seeds() {
    for (name, b) in seeds("references") {
        match parse_references(text(&b)) {
            Ok(r) => assert_eq!(parse_references(&write_references(&r).unwrap()).unwrap(), r),
            Err(_) => assert_eq!(name, "empty_field"),
        }
    }
    for (name, b) in seeds("predictions") {
        match parse_predictions(text(&b)) {
            Ok(p) => assert_eq!(parse_predictions(&write_predictions(&p).unwrap()).unwrap(), p),
            Err(_) => assert_eq!(name, "duplicate"),
        }
    }
}

#[test]
fn embedding_seeds() {
    for (name, b) in seeds("embeddings") {
        let dim = b[0] as usize % 8;
        let r = parse_embeddings(text(&b[1..]), dim);
        assert_eq!(r.is_ok(), name == "three", "{name}");
    }
}

#[test]
fn tokenize_seeds() {
    for (_, b) in seeds("tokenize") {
        let words = normalize(text(&b));
        assert_eq!(normalize(&words.join(" ")), words);
        let mut vocab = Vocabulary::new();
        for w in &words {
            vocab.add(w);
        }
        assert_eq!(vocab.tokenize(text(&b)).len(), words.len());
    }
}
