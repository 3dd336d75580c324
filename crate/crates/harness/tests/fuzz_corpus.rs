//! Replays the checked-in fuzz seeds through the same assertions the fuzz
//! targets make.

use std::fs;
use std::path::PathBuf;

use prunelab::model::Checkpoint;
use prunelab::pruner::Mask;
use prunelab_harness::config::parse_config;
use prunelab_harness::output::{read_cells, write_cells};
use prunelab_harness::range::{parse_f64_list, parse_u64_list};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn mask_seeds() {
    let mut decoded = 0;
    for (name, bytes) in seeds("mask_decode") {
        if let Ok(mask) = Mask::from_bytes(&bytes) {
            assert_eq!(mask.to_bytes(), bytes, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded > 0);
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (name, bytes) in seeds("checkpoint_decode") {
        if let Ok(ckpt) = Checkpoint::from_bytes(&bytes) {
            assert_eq!(ckpt.to_bytes(), bytes, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded > 0);
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("config_parse") {
        let text = String::from_utf8(bytes).unwrap();
        let spec = parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let printed = spec.to_config_string();
        assert_eq!(parse_config(&printed).unwrap().to_config_string(), printed, "{name}");
    }
}

#[test]
fn range_seeds() {
    for (name, bytes) in seeds("range_parse") {
        let text = String::from_utf8(bytes).unwrap();
        let reals = parse_f64_list(&text);
        let ints = parse_u64_list(&text);
        assert!(reals.is_ok() || ints.is_ok(), "{name}");
        if let Ok(v) = reals {
            assert!(!v.is_empty() && v.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn cells_seeds() {
    for (name, bytes) in seeds("cells_csv") {
        let cells = read_cells(&bytes[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
        let mut again = Vec::new();
        write_cells(&mut again, &cells).unwrap();
        assert_eq!(again, bytes, "{name}");
    }
}
