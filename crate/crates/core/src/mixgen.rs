//! Constrained artificial mixture sampling and rendering.
//!
//! A mixture is one target stem plus `k` accompaniment stems of distinct
//! instruments, all from the same style and split, summed with unit gain.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, resample, write_wav, WavEncoding, WavError, Waveform, CANONICAL_RATE};
use crate::corpus::{Corpus, Split, SplitCounts, StemRecord};

/// Draws per mixture before giving up on finding an unused stem set.
pub const RETRY_BOUND: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum MixgenError {
    #[error("no style in split '{0}' has both a target stem and an accompaniment instrument")]
    NoCandidates(Split),
    #[error("combination space exhausted for split '{0}' after {RETRY_BOUND} draws")]
    Exhausted(Split),
    #[error("unknown stem id '{0}'")]
    UnknownStem(String),
    #[error("stems of mixture {0} have no overlapping samples")]
    ZeroOverlap(String),
    #[error("mixture {index} of split '{split}': {source}")]
    AtIndex {
        split: Split,
        index: usize,
        source: Box<MixgenError>,
    },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub mixture_id: String,
    pub split: Split,
    pub style: String,
    /// Target stem first, then accompaniment stems by instrument name.
    pub stem_ids: Vec<String>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn stem_set(&self) -> BTreeSet<String> {
        self.stem_ids.iter().cloned().collect()
    }
}

/// Where the corpus and its split assignment came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub root: PathBuf,
    pub split_file: Option<PathBuf>,
    pub split_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub specs: Vec<MixtureSpec>,
    pub counts: SplitCounts,
    pub master_seed: u64,
    pub corpus: CorpusRef,
    pub sample_rate: u32,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, MixgenError> {
        let text = std::fs::read_to_string(path).map_err(|source| MixgenError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| MixgenError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn split_specs(&self, split: Split) -> impl Iterator<Item = &MixtureSpec> {
        self.specs.iter().filter(move |s| s.split == split)
    }
}

/// Paths of a rendered mixture under a dataset directory.
pub fn mixture_dir(dataset: &Path, spec: &MixtureSpec) -> PathBuf {
    dataset.join(spec.split.as_str()).join(&spec.mixture_id)
}

/// Stable per-mixture seed, so any mixture can be regenerated in isolation.
pub fn mixture_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(split.as_str().as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Stems available in one split, by style then instrument.
struct Pool<'a> {
    target: Vec<&'a StemRecord>,
    others: BTreeMap<&'a str, Vec<&'a StemRecord>>,
}

fn pools<'a>(c: &'a Corpus, split: Split) -> Vec<(&'a str, Pool<'a>)> {
    let mut by_style: BTreeMap<&str, Pool> = BTreeMap::new();
    for r in c.records.iter().filter(|r| r.split == split) {
        let p = by_style.entry(r.style.as_str()).or_insert_with(|| Pool {
            target: Vec::new(),
            others: BTreeMap::new(),
        });
        if c.is_target(r) {
            p.target.push(r);
        } else {
            p.others.entry(r.instrument.as_str()).or_default().push(r);
        }
    }
    by_style
        .into_iter()
        .filter(|(_, p)| !p.target.is_empty() && !p.others.is_empty())
        .map(|(s, mut p)| {
            p.target.sort_by(|a, b| a.id.cmp(&b.id));
            for v in p.others.values_mut() {
                v.sort_by(|a, b| a.id.cmp(&b.id));
            }
            (s, p)
        })
        .collect()
}

/// A drawn stem combination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub style: String,
    pub stem_ids: Vec<String>,
}

/// Draws a stem set whose id set is not in `existing`.
///
/// Style is uniform over eligible styles, the target stem uniform within
/// the style, the accompaniment count `k` uniform in `1..=A`, then `k`
/// distinct instruments and one stem of each, all uniform.
pub fn sample_mixture(
    c: &Corpus,
    split: Split,
    rng: &mut impl Rng,
    existing: &HashSet<BTreeSet<String>>,
) -> Result<Selection, MixgenError> {
    let pools = pools(c, split);
    if pools.is_empty() {
        return Err(MixgenError::NoCandidates(split));
    }
    for _ in 0..RETRY_BOUND {
        let (style, pool) = &pools[rng.gen_range(0..pools.len())];
        let target = pool.target[rng.gen_range(0..pool.target.len())];
        let instruments: Vec<&Vec<&StemRecord>> = pool.others.values().collect();
        let a = instruments.len();
        let k = rng.gen_range(1..=a);
        let mut chosen = sample(rng, a, k).into_vec();
        chosen.sort_unstable();
        let mut ids = vec![target.id.clone()];
        for i in chosen {
            let stems = instruments[i];
            ids.push(stems[rng.gen_range(0..stems.len())].id.clone());
        }
        let set: BTreeSet<String> = ids.iter().cloned().collect();
        if !existing.contains(&set) {
            return Ok(Selection {
                style: style.to_string(),
                stem_ids: ids,
            });
        }
    }
    Err(MixgenError::Exhausted(split))
}

/// Samples all specs for the requested counts, splits in canonical order.
pub fn plan_dataset(c: &Corpus, counts: SplitCounts, master_seed: u64) -> Result<Vec<MixtureSpec>, MixgenError> {
    let mut existing = HashSet::new();
    let mut specs = Vec::with_capacity(counts.total());
    for split in Split::ALL {
        for index in 0..counts.get(split) {
            let seed = mixture_seed(master_seed, split, index);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = sample_mixture(c, split, &mut rng, &existing).map_err(|e| MixgenError::AtIndex {
                split,
                index,
                source: Box::new(e),
            })?;
            existing.insert(sel.stem_ids.iter().cloned().collect());
            specs.push(MixtureSpec {
                mixture_id: format!("{split}-{index:04}"),
                split,
                style: sel.style,
                stem_ids: sel.stem_ids,
                seed,
            });
        }
    }
    Ok(specs)
}

/// Loads stems at the canonical rate, caching repeated reads.
#[derive(Default)]
pub struct StemCache {
    loaded: HashMap<String, Waveform>,
}

impl StemCache {
    pub fn get(&mut self, c: &Corpus, id: &str) -> Result<&Waveform, MixgenError> {
        if !self.loaded.contains_key(id) {
            let rec = c.record(id).ok_or_else(|| MixgenError::UnknownStem(id.to_string()))?;
            let mut w = read_wav(&rec.path)?;
            if w.sample_rate() != CANONICAL_RATE {
                w = resample(&w, CANONICAL_RATE);
            }
            self.loaded.insert(id.to_string(), w);
        }
        Ok(&self.loaded[id])
    }
}

/// Sums the spec's stems, truncated to the shortest one, in `stem_ids` order.
pub fn render_mixture(spec: &MixtureSpec, c: &Corpus) -> Result<(Waveform, Waveform), MixgenError> {
    render_with_cache(spec, c, &mut StemCache::default())
}

pub fn render_with_cache(
    spec: &MixtureSpec,
    c: &Corpus,
    cache: &mut StemCache,
) -> Result<(Waveform, Waveform), MixgenError> {
    let mut len = usize::MAX;
    for id in &spec.stem_ids {
        len = len.min(cache.get(c, id)?.len());
    }
    if len == 0 || spec.stem_ids.is_empty() {
        return Err(MixgenError::ZeroOverlap(spec.mixture_id.clone()));
    }
    let target = cache.get(c, &spec.stem_ids[0])?.truncated(len);
    let mut mix = target.samples().to_vec();
    for id in &spec.stem_ids[1..] {
        for (m, &s) in mix.iter_mut().zip(cache.get(c, id)?.samples()) {
            *m += s;
        }
    }
    let mix = Waveform::new(mix, CANONICAL_RATE).map_err(|e| MixgenError::Manifest {
        path: PathBuf::from(&spec.mixture_id),
        detail: e.to_string(),
    })?;
    Ok((mix, target))
}

/// Plans, renders and writes a dataset:
/// `<out>/<split>/<id>/{mixture,target}.wav` (float32) and `<out>/manifest.json`.
pub fn generate_dataset(
    c: &Corpus,
    counts: SplitCounts,
    master_seed: u64,
    out_dir: &Path,
    corpus_ref: CorpusRef,
) -> Result<DatasetManifest, MixgenError> {
    let specs = plan_dataset(c, counts, master_seed)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MixgenError::Io { path, source }
    };
    let mut cache = StemCache::default();
    let mut index: HashMap<Split, usize> = HashMap::new();
    for spec in &specs {
        let i = index.entry(spec.split).or_default();
        let mut write_one = || -> Result<(), MixgenError> {
            let (mix, target) = render_with_cache(spec, c, &mut cache)?;
            let dir = mixture_dir(out_dir, spec);
            std::fs::create_dir_all(&dir).map_err(io(&dir))?;
            write_wav(dir.join("mixture.wav"), &mix, WavEncoding::Float32)?;
            write_wav(dir.join("target.wav"), &target, WavEncoding::Float32)?;
            Ok(())
        };
        write_one().map_err(|e| MixgenError::AtIndex {
            split: spec.split,
            index: *i,
            source: Box::new(e),
        })?;
        *i += 1;
    }
    let manifest = DatasetManifest {
        specs,
        counts,
        master_seed,
        corpus: corpus_ref,
        sample_rate: CANONICAL_RATE,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).expect("serializable manifest");
    std::fs::write(&path, bytes).map_err(io(&path))?;
    log::info!("wrote {} mixtures to {}", manifest.specs.len(), out_dir.display());
    Ok(manifest)
}
