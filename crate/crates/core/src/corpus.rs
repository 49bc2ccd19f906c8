//! Stem corpus scanning and train/valid/test split allocation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{wav_info, WavError};

pub const DEFAULT_TARGET: &str = "surdo";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("no audio files found under {0}")]
    NoAudio(PathBuf),
    #[error("manifest references missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("duplicate stem id '{0}'")]
    DuplicateId(String),
    #[error("invalid metadata for {file}: {detail}")]
    Metadata { file: String, detail: String },
    #[error("impossible split constraint: {}", .0.join("; "))]
    ImpossibleConstraint(Vec<String>),
    #[error("invalid split request: {0}")]
    InvalidRequest(String),
    #[error("split file {path}: {detail}")]
    SplitFile { path: PathBuf, detail: String },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    Unassigned,
}

impl Split {
    /// The three real splits in canonical order.
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// A count per real split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, valid: usize, test: usize) -> Self {
        Self { train, valid, test }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
            Split::Unassigned => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

impl FromStr for SplitCounts {
    type Err = String;

    /// Parses `train,valid,test` (also accepts `/` as separator).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split([',', '/']).map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three counts, got '{s}'"));
        }
        let n = |p: &str| p.parse::<usize>().map_err(|e| format!("count '{p}': {e}"));
        Ok(Self::new(n(parts[0])?, n(parts[1])?, n(parts[2])?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemRecord {
    pub id: String,
    pub path: PathBuf,
    pub instrument: String,
    pub style: String,
    pub tempo: f64,
    pub split: Split,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<StemRecord>,
    pub target_instrument: String,
    /// Audio files whose metadata could not be determined.
    pub skipped: Vec<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    file: String,
    instrument: String,
    style: String,
    bpm: f64,
}

/// Parses `<id>_<instrument>_<style>_<bpm>.wav`.
pub fn parse_stem_name(file_name: &str) -> Option<(String, String, f64)> {
    let stem = file_name.strip_suffix(".wav").or_else(|| file_name.strip_suffix(".WAV"))?;
    let parts: Vec<&str> = stem.split('_').collect();
    let [id, instrument, style, bpm] = parts.as_slice() else {
        return None;
    };
    let bpm: f64 = bpm.parse().ok()?;
    if id.is_empty() || instrument.is_empty() || style.is_empty() || !(bpm.is_finite() && bpm > 0.0) {
        return None;
    }
    Some((instrument.to_string(), style.to_string(), bpm))
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn stem_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn make_record(
    path: PathBuf,
    instrument: String,
    style: String,
    tempo: f64,
) -> Result<StemRecord, CorpusError> {
    let file = path.display().to_string();
    if instrument.is_empty() || style.is_empty() {
        return Err(CorpusError::Metadata {
            file,
            detail: "instrument and style must be non-empty".into(),
        });
    }
    if !(tempo.is_finite() && tempo > 0.0) {
        return Err(CorpusError::Metadata {
            file,
            detail: format!("tempo {tempo} must be positive"),
        });
    }
    let info = wav_info(&path)?;
    Ok(StemRecord {
        id: stem_id(&path),
        duration: info.frames as f64 / info.sample_rate as f64,
        path,
        instrument,
        style,
        tempo,
        split: Split::Unassigned,
    })
}

/// Scans `root` for WAV stems.
///
/// With a manifest (JSON array of `{file, instrument, style, bpm}`, paths
/// relative to `root`) the manifest supplies metadata; otherwise it is
/// parsed from file names. Files without usable metadata are skipped and
/// listed in [`Corpus::skipped`].
pub fn scan_corpus(root: &Path, manifest: Option<&Path>) -> Result<Corpus, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .follow_links(true)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && is_wav(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CorpusError::NoAudio(root.to_path_buf()));
    }

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    if let Some(mpath) = manifest {
        let text = std::fs::read_to_string(mpath).map_err(io_err(mpath))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| CorpusError::Metadata {
                file: mpath.display().to_string(),
                detail: e.to_string(),
            })?;
        let missing: Vec<String> = entries
            .iter()
            .filter(|e| !root.join(&e.file).is_file())
            .map(|e| e.file.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CorpusError::MissingFiles(missing));
        }
        let listed: HashSet<PathBuf> = entries.iter().map(|e| root.join(&e.file)).collect();
        skipped.extend(files.iter().filter(|f| !listed.contains(*f)).cloned());
        for e in entries {
            records.push(make_record(root.join(&e.file), e.instrument, e.style, e.bpm)?);
        }
    } else {
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            match parse_stem_name(&name) {
                Some((instrument, style, bpm)) => records.push(make_record(f, instrument, style, bpm)?),
                None => skipped.push(f),
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} files without usable metadata", skipped.len());
    }
    if records.is_empty() {
        return Err(CorpusError::NoAudio(root.to_path_buf()));
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Corpus {
        root: root.to_path_buf(),
        records,
        target_instrument: DEFAULT_TARGET.to_string(),
        skipped,
    })
}

impl Corpus {
    pub fn with_target(mut self, instrument: &str) -> Self {
        self.target_instrument = instrument.to_string();
        self
    }

    pub fn record(&self, id: &str) -> Option<&StemRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn instruments(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.records.iter().map(|r| r.instrument.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn styles(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.records.iter().map(|r| r.style.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_target(&self, r: &StemRecord) -> bool {
        r.instrument == self.target_instrument
    }

    pub fn target_records(&self) -> impl Iterator<Item = &StemRecord> {
        self.records.iter().filter(|r| self.is_target(r))
    }

    /// Record indices per `(instrument, style)` group, in id order.
    pub fn groups(&self) -> BTreeMap<(String, String), Vec<usize>> {
        let mut g: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            g.entry((r.instrument.clone(), r.style.clone())).or_default().push(i);
        }
        g
    }

    pub fn split_counts(&self, instrument: Option<&str>) -> SplitCounts {
        let mut c = SplitCounts::new(0, 0, 0);
        for r in self.records.iter().filter(|r| instrument.is_none_or(|i| r.instrument == i)) {
            match r.split {
                Split::Train => c.train += 1,
                Split::Valid => c.valid += 1,
                Split::Test => c.test += 1,
                Split::Unassigned => {}
            }
        }
        c
    }
}

/// Per-split member counts for one group of `n` records.
fn group_quota(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], String> {
    match n {
        0 => return Ok([0, 0, 0]),
        1 => return Ok([1, 0, 0]),
        2 => return Ok([1, 0, 1]),
        _ => {}
    }
    if let Some(i) = ratios.iter().position(|&r| r <= 0.0) {
        return Err(format!(
            "{} ratio is 0% but {n} members need coverage of every split",
            Split::ALL[i]
        ));
    }
    // largest remainder
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / 100.0).collect();
    let mut q: [usize; 3] = [0; 3];
    for i in 0..3 {
        q[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - q.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    // coverage repair
    while let Some(empty) = q.iter().position(|&c| c == 0) {
        let donor = (0..3).max_by(|&a, &b| q[a].cmp(&q[b]).then(b.cmp(&a))).expect("three splits");
        q[donor] -= 1;
        q[empty] += 1;
    }
    Ok(q)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Assigns every record a split.
///
/// Target-instrument records get exactly `target_counts` (any surplus stays
/// unassigned). Every other `(instrument, style)` group is split by
/// `other_ratios` (percentages) using largest remainder, then repaired so
/// groups of three or more cover all splits. Groups of one go to train and
/// groups of two to train and test. Each group draws from its own random
/// stream, so results do not depend on iteration order elsewhere.
pub fn allocate_splits(
    corpus: &Corpus,
    target_counts: SplitCounts,
    other_ratios: [f64; 3],
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if other_ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (other_ratios.iter().sum::<f64>() - 100.0).abs() > 1e-6
    {
        return Err(CorpusError::InvalidRequest(format!(
            "ratios {other_ratios:?} must be non-negative and sum to 100"
        )));
    }
    let n_target = corpus.target_records().count();
    if target_counts.total() > n_target {
        return Err(CorpusError::InvalidRequest(format!(
            "requested {} {} stems but the corpus has {n_target}",
            target_counts.total(),
            corpus.target_instrument
        )));
    }
    let mut out = corpus.clone();
    for r in &mut out.records {
        r.split = Split::Unassigned;
    }

    let mut targets: Vec<usize> = (0..out.records.len()).filter(|&i| out.is_target(&out.records[i])).collect();
    targets.sort_by(|&a, &b| out.records[a].id.cmp(&out.records[b].id));
    targets.shuffle(&mut rng_for(seed, 0));
    let mut it = targets.into_iter();
    for split in Split::ALL {
        for i in it.by_ref().take(target_counts.get(split)) {
            out.records[i].split = split;
        }
    }

    let mut problems = Vec::new();
    for (g, ((instrument, style), mut members)) in out.groups().into_iter().enumerate() {
        if instrument == out.target_instrument {
            continue;
        }
        let quota = match group_quota(members.len(), other_ratios) {
            Ok(q) => q,
            Err(why) => {
                problems.push(format!("group ({instrument}, {style}): {why}"));
                continue;
            }
        };
        members.shuffle(&mut rng_for(seed, g as u64 + 1));
        let mut it = members.into_iter();
        for (split, &count) in Split::ALL.iter().zip(&quota) {
            for i in it.by_ref().take(count) {
                out.records[i].split = *split;
            }
        }
    }
    if !problems.is_empty() {
        return Err(CorpusError::ImpossibleConstraint(problems));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub id: String,
    pub split: Split,
}

/// Persisted form of an allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub assignments: Vec<SplitAssignment>,
}

impl SplitFile {
    pub fn from_corpus(corpus: &Corpus, seed: u64) -> Self {
        Self {
            seed,
            assignments: corpus
                .records
                .iter()
                .map(|r| SplitAssignment {
                    id: r.id.clone(),
                    split: r.split,
                })
                .collect(),
        }
    }

    /// Writes the file and returns its SHA-256 checksum.
    pub fn save(&self, path: &Path) -> Result<String, CorpusError> {
        let bytes = serde_json::to_vec_pretty(self).expect("serializable splits");
        std::fs::write(path, &bytes).map_err(io_err(path))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::SplitFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Copies the assignment onto `corpus`; every record must be covered.
    pub fn apply(&self, corpus: &Corpus, path: &Path) -> Result<Corpus, CorpusError> {
        let map: HashMap<&str, Split> = self.assignments.iter().map(|a| (a.id.as_str(), a.split)).collect();
        let mut out = corpus.clone();
        let mut unknown = Vec::new();
        for r in &mut out.records {
            match map.get(r.id.as_str()) {
                Some(&s) => r.split = s,
                None => unknown.push(r.id.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(CorpusError::SplitFile {
                path: path.to_path_buf(),
                detail: format!("no assignment for {}", unknown.join(", ")),
            });
        }
        Ok(out)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
