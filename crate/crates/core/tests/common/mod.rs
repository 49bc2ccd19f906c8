#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use surdo_sep::corpus::{allocate_splits, scan_corpus, Corpus, Split, SplitCounts};
use surdo_sep::fixture::{synth_fixture, FixtureProfile};
use surdo_sep::mixgen::{generate_dataset, CorpusRef, DatasetManifest, MixtureSpec};
use surdo_sep::unet::UNetArch;

pub const DESK_TARGETS: SplitCounts = SplitCounts {
    train: 8,
    valid: 2,
    test: 2,
};
pub const BRID_TARGETS: SplitCounts = SplitCounts {
    train: 22,
    valid: 1,
    test: 3,
};
pub const RATIOS: [f64; 3] = [85.0, 5.0, 10.0];

/// Scanned synthetic corpus written under `dir/stems`.
pub fn fixture_corpus(dir: &Path, profile: FixtureProfile, seed: u64) -> Corpus {
    let stems = dir.join("stems");
    synth_fixture(&stems, profile, seed, None).unwrap();
    scan_corpus(&stems, None).unwrap()
}

pub fn split_corpus(dir: &Path, profile: FixtureProfile, seed: u64) -> Corpus {
    let c = fixture_corpus(dir, profile, seed);
    let counts = match profile {
        FixtureProfile::Desk => DESK_TARGETS,
        FixtureProfile::Brid => BRID_TARGETS,
    };
    allocate_splits(&c, counts, RATIOS, seed).unwrap()
}

/// Rendered desk dataset under `dir/dataset`.
pub fn desk_dataset(dir: &Path, counts: SplitCounts, seed: u64) -> (Corpus, DatasetManifest, PathBuf) {
    let c = split_corpus(dir, FixtureProfile::Desk, seed);
    let out = dir.join("dataset");
    let reference = CorpusRef {
        root: c.root.clone(),
        split_file: None,
        split_checksum: None,
    };
    let m = generate_dataset(&c, counts, seed, &out, reference).unwrap();
    (c, m, out)
}

/// Two-stage net small enough for per-test training runs.
pub fn tiny_arch() -> UNetArch {
    UNetArch {
        encoder_channels: vec![4, 8],
        patch_bins: 64,
        patch_frames: 16,
        dropout_stages: 1,
        ..UNetArch::default()
    }
}

/// Independent audit of a spec list; returns every violation found.
pub fn audit_specs(c: &Corpus, specs: &[MixtureSpec]) -> Vec<String> {
    let mut problems = Vec::new();
    for (i, a) in specs.iter().enumerate() {
        let set_a: BTreeSet<&String> = a.stem_ids.iter().collect();
        if set_a.len() != a.stem_ids.len() {
            problems.push(format!("{}: repeated stem", a.mixture_id));
        }
        for b in &specs[i + 1..] {
            let set_b: BTreeSet<&String> = b.stem_ids.iter().collect();
            if set_a == set_b {
                problems.push(format!("{} duplicates {}", a.mixture_id, b.mixture_id));
            }
        }
        let recs: Vec<_> = a.stem_ids.iter().map(|id| c.record(id).expect("known stem")).collect();
        let targets = recs.iter().filter(|r| r.instrument == c.target_instrument).count();
        if targets != 1 || recs[0].instrument != c.target_instrument {
            problems.push(format!("{}: {targets} target stems", a.mixture_id));
        }
        if recs.len() < 2 {
            problems.push(format!("{}: no accompaniment", a.mixture_id));
        }
        let instruments: HashSet<&str> = recs.iter().map(|r| r.instrument.as_str()).collect();
        if instruments.len() != recs.len() {
            problems.push(format!("{}: repeated instrument", a.mixture_id));
        }
        if recs.iter().any(|r| r.style != a.style) {
            problems.push(format!("{}: mixed styles", a.mixture_id));
        }
        if recs.iter().any(|r| r.split != a.split) {
            problems.push(format!("{}: crosses splits", a.mixture_id));
        }
    }
    problems
}

pub fn count_split(specs: &[MixtureSpec], split: Split) -> usize {
    specs.iter().filter(|s| s.split == split).count()
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}
