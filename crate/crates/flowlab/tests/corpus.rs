//! Replays the checked-in fuzz corpus seeds through both untrusted-input
//! parsers, so their round-trip contracts stay covered by `cargo test` on a
//! stable toolchain; the fuzz targets under `fuzz/` explore beyond the seeds.

use std::fs;
use std::path::PathBuf;

use flowlab::checkpoint::{decode, encode};
use flowlab::config::TrainConfig;

fn corpus_dir(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn seed_files(target: &str) -> Vec<PathBuf> {
    let dir = corpus_dir(target);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {}: {e}", dir.display()))
        .map(|entry| entry.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files
}

#[test]
fn config_seeds_parse_and_echo_exactly() {
    for path in seed_files("config_parse") {
        let text = fs::read_to_string(&path).unwrap();
        let cfg = TrainConfig::parse(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let echoed = cfg.to_canonical_string();
        assert_eq!(TrainConfig::parse(&echoed).unwrap(), cfg, "{}", path.display());
        // Seeds are stored in canonical form; echoing must be the identity.
        assert_eq!(echoed, text, "{} is not canonical", path.display());
    }
}

#[test]
fn checkpoint_seeds_decode_and_reencode_exactly() {
    for path in seed_files("checkpoint_decode") {
        let bytes = fs::read(&path).unwrap();
        let ck = decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(encode(&ck), bytes, "{} round trip drifted", path.display());
    }
}
