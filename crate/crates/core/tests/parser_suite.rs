mod common;

use common::oracles::{corruptions, random_modules, round_trip};
use proptest::prelude::*;
use saibench::sail::{ast_to_canonical_json, parse};
use std::path::{Path, PathBuf};

fn corpus_files() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(common::corpus())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "sail"))
        .collect();
    v.sort();
    v
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// `SAIBENCH_BLESS=1` rewrites the golden files instead of comparing.
#[test]
fn corpus_matches_golden_json() {
    let bless = std::env::var_os("SAIBENCH_BLESS").is_some();
    let files = corpus_files();
    assert!(files.len() >= 20);
    for f in files {
        let decls = parse(&std::fs::read_to_string(&f).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        let json = ast_to_canonical_json(&decls);
        let golden = golden_dir().join(f.with_extension("json").file_name().unwrap());
        if bless {
            std::fs::write(&golden, format!("{json}\n")).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&golden).unwrap_or_else(|e| panic!("{}: {e}", golden.display()));
        assert_eq!(json, want.trim_end(), "{} drifted from its golden AST", f.display());
    }
}

#[test]
fn corpus_round_trips() {
    for f in corpus_files() {
        let decls = parse(&std::fs::read_to_string(&f).unwrap()).unwrap();
        round_trip(&decls).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
    }
}

#[test]
fn corruptions_are_located_within_one_token() {
    let sources: Vec<String> = corpus_files().iter().map(|f| std::fs::read_to_string(f).unwrap()).collect();
    let stats = corruptions(&sources, 11, 300).unwrap();
    let far: Vec<_> = stats.located.iter().filter(|(d, _, _)| *d > 1).collect();
    assert!(far.is_empty(), "{far:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_modules_round_trip(seed in any::<u64>()) {
        let m = random_modules(seed);
        prop_assert!(round_trip(&m).is_ok(), "{}", round_trip(&m).unwrap_err());
    }
}
