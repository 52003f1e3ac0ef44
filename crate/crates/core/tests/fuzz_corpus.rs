//! Replays the fuzz seed corpora, plus truncated and bit-flipped variants, through
//! the same checks the fuzz targets make.

use std::path::{Path, PathBuf};

use noveldec::config::{RunConfig, RunManifest};
use noveldec::dataset::{encode_idx, parse_idx, parse_manifest_csv, DatasetManifest, SplitFile};
use noveldec::scoring::EvalReport;
use noveldec::trainer::Checkpoint;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {target}");
    files.into_iter().map(|p| (p.clone(), std::fs::read(p).unwrap())).collect()
}

/// The seed itself, every prefix at a coarse stride, and single-bit flips.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    let stride = (seed.len() / 64).max(1);
    for cut in (0..seed.len()).step_by(stride) {
        out.push(seed[..cut].to_vec());
    }
    for i in (0..seed.len()).step_by(stride) {
        let mut v = seed.to_vec();
        v[i] ^= 1 << (i % 8);
        out.push(v);
    }
    out
}

fn each_text(target: &str, mut f: impl FnMut(&str)) {
    for (_, seed) in corpus(target) {
        for v in variants(&seed) {
            if let Ok(text) = std::str::from_utf8(&v) {
                f(text);
            }
        }
    }
}

#[test]
fn idx_seeds_parse_and_round_trip() {
    for (path, seed) in corpus("idx") {
        assert!(parse_idx(&seed).is_ok(), "{}", path.display());
        for v in variants(&seed) {
            if let Ok(a) = parse_idx(&v) {
                assert_eq!(parse_idx(&encode_idx(&a)).unwrap(), a);
            }
        }
    }
}

#[test]
fn manifest_csv_seeds() {
    for (path, seed) in corpus("manifest_csv") {
        assert!(parse_manifest_csv(std::str::from_utf8(&seed).unwrap()).is_ok(), "{}", path.display());
    }
    each_text("manifest_csv", |t| {
        if let Ok(rows) = parse_manifest_csv(t) {
            assert!(rows.iter().all(|r| !r.id.is_empty()));
        }
    });
}

#[test]
fn run_config_seeds() {
    let mut parsed = 0;
    for (_, seed) in corpus("run_config") {
        let text = std::str::from_utf8(&seed).unwrap();
        parsed += usize::from(RunConfig::parse(text).is_ok() || DatasetManifest::parse(text).is_ok());
    }
    assert_eq!(parsed, corpus("run_config").len());
    each_text("run_config", |t| {
        if let Ok(cfg) = RunConfig::parse(t) {
            assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
        let _ = DatasetManifest::parse(t);
    });
}

#[test]
fn checkpoint_seeds_decode_and_damage_is_rejected() {
    for (path, seed) in corpus("checkpoint") {
        let ckpt = Checkpoint::decode(&seed).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ckpt.encode(), seed);
        for v in variants(&seed).into_iter().skip(1) {
            if let Ok(c) = Checkpoint::decode(&v) {
                let bytes = c.encode();
                assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
            }
        }
    }
}

#[test]
fn split_and_manifest_json_seeds() {
    for (path, seed) in corpus("split_json") {
        let text = std::str::from_utf8(&seed).unwrap();
        assert!(SplitFile::parse(text).is_ok() || RunManifest::parse(text).is_ok(), "{}", path.display());
    }
    each_text("split_json", |t| {
        if let Ok(s) = SplitFile::parse(t) {
            assert_eq!(SplitFile::parse(&s.to_json()).unwrap(), s);
        }
        let _ = RunManifest::parse(t);
    });
}

#[test]
fn report_json_seeds() {
    for (path, seed) in corpus("report_json") {
        assert!(EvalReport::from_json(std::str::from_utf8(&seed).unwrap()).is_ok(), "{}", path.display());
    }
    each_text("report_json", |t| {
        if let Ok(r) = EvalReport::from_json(t) {
            assert!(EvalReport::from_json(&r.to_json()).is_ok());
        }
    });
}
