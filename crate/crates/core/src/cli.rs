//! Command-line pipeline: scan, splits, generate, train, separate, evaluate,
//! report and synth-fixture, chained through one output root.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, WavEncoding};
use crate::bsseval::{evaluate_mixture_baseline, evaluate_split, format_report, EvalError, EvalReport};
use crate::corpus::{allocate_splits, scan_corpus, Corpus, Split, SplitCounts, SplitFile, DEFAULT_TARGET};
use crate::fixture::{synth_fixture, FixtureProfile};
use crate::mixgen::{generate_dataset, CorpusRef, DatasetManifest, MANIFEST_FILE};
use crate::separation::{batch_separate, load_model, separate, SeparationConfig};
use crate::training::{train, TrainConfig, BEST_CHECKPOINT};
use crate::unet::UNetArch;

const CORPUS_FILE: &str = "corpus.json";
const SPLITS_FILE: &str = "splits.json";
const DATASET_DIR: &str = "dataset";
const TRAIN_DIR: &str = "train";
const ESTIMATES_DIR: &str = "estimates";
const EVAL_DIR: &str = "eval";
const REPORT_FILE: &str = "report.txt";
const FIXTURE_DIR: &str = "fixture";
const LOCK_FILE: &str = ".lock";

#[derive(Parser, Debug)]
#[command(name = "surdo-sep", version, about = "Percussion stem separation pipeline")]
struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root shared by all subcommands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Index a directory of stems.
    Scan(ScanArgs),
    /// Assign stems to train/valid/test.
    Splits(SplitsArgs),
    /// Sample and render mixtures.
    Generate(GenerateArgs),
    /// Train the mask network.
    Train(TrainArgs),
    /// Separate dataset mixtures or standalone WAV files.
    Separate(SeparateArgs),
    /// Score estimates of one split.
    Evaluate(EvaluateArgs),
    /// Tabulate all evaluated splits.
    Report,
    /// Write a synthetic percussion corpus.
    SynthFixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// Directory of `<id>_<instrument>_<style>_<bpm>.wav` stems.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// JSON metadata manifest: [{file, instrument, style, bpm}].
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args, Debug)]
struct SplitsArgs {
    /// Target-instrument stems per split, `train,valid,test`.
    #[arg(long)]
    counts: Option<SplitCounts>,
    /// Percentages for the other stems, `train,valid,test`.
    #[arg(long)]
    ratios: Option<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Mixtures per split, `train,valid,test`.
    #[arg(long)]
    counts: Option<SplitCounts>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchPreset {
    Default,
    Desk,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    arch: Option<ArchPreset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patches_per_track: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    #[arg(long, default_value = "test")]
    split: Split,
    /// Defaults to the best checkpoint under the output root.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Standalone mixtures to separate instead of a dataset split.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, default_value = "test")]
    split: Split,
    /// Score the unprocessed mixture instead of the estimates.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    profile: Option<FixtureProfile>,
    /// Stem length in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

/// Everything a pipeline run needs; loaded from `--config` and overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub target_instrument: String,
    pub target_counts: SplitCounts,
    pub other_ratios: [f64; 3],
    pub mixture_counts: SplitCounts,
    pub seed: u64,
    pub arch: UNetArch,
    pub train: TrainConfig,
    /// `None` tiles with the checkpoint's patch width and half overlap.
    pub separation: Option<SeparationConfig>,
    pub out: PathBuf,
    pub fixture_profile: FixtureProfile,
    pub fixture_duration: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_root: None,
            manifest: None,
            target_instrument: DEFAULT_TARGET.to_string(),
            target_counts: SplitCounts::new(22, 1, 3),
            other_ratios: [85.0, 5.0, 10.0],
            mixture_counts: SplitCounts::new(100, 10, 30),
            seed: 0,
            arch: UNetArch::default(),
            train: TrainConfig::default(),
            separation: None,
            out: PathBuf::from("out"),
            fixture_profile: FixtureProfile::Desk,
            fixture_duration: None,
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad arguments, config or missing prerequisites.
    Invalid(String),
    /// The operation itself failed.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(m: impl std::fmt::Display) -> CliError {
    CliError::Invalid(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

fn parse_ratios(s: &str) -> Result<[f64; 3], CliError> {
    let v: Vec<f64> = s
        .split([',', '/'])
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| invalid(format!("ratios '{s}': {e}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| invalid(format!("expected three ratios, got '{s}'")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read {} ({e}); run `{hint}` first", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).expect("serializable");
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Exclusive marker for one writer per output root; removed on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        let path = out.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                runtime(format!(
                    "{} exists: another run is using this output root (delete it if stale)",
                    path.display()
                ))
            } else {
                runtime(format!("{}: {e}", path.display()))
            }
        })?;
        Ok(Lock(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => read_json(p, "a valid --config")?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

/// Parses `argv` (including the program name), runs one subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let (CliError::Invalid(m) | CliError::Runtime(m)) = &e;
            eprintln!("error: {m}");
            e.code()
        }
    }
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let mut cfg = load_config(&cli)?;
    let out = cfg.out.clone();
    // validate subcommand-specific overrides before touching the output root
    match &cli.command {
        Command::Scan(a) => {
            if let Some(c) = &a.corpus {
                cfg.corpus_root = Some(c.clone());
            }
            if let Some(m) = &a.manifest {
                cfg.manifest = Some(m.clone());
            }
            if let Some(t) = &a.target {
                cfg.target_instrument = t.clone();
            }
            let root = cfg.corpus_root.as_ref().ok_or_else(|| invalid("scan needs --corpus or corpus_root"))?;
            if !root.is_dir() {
                return Err(invalid(format!("corpus root {} is not a directory", root.display())));
            }
            if let Some(m) = &cfg.manifest {
                if !m.is_file() {
                    return Err(invalid(format!("manifest {} not found", m.display())));
                }
            }
        }
        Command::Splits(a) => {
            if let Some(c) = a.counts {
                cfg.target_counts = c;
            }
            if let Some(r) = &a.ratios {
                cfg.other_ratios = parse_ratios(r)?;
            }
        }
        Command::Generate(a) => {
            if let Some(c) = a.counts {
                cfg.mixture_counts = c;
            }
        }
        Command::Train(a) => {
            if let Some(p) = a.arch {
                cfg.arch = match p {
                    ArchPreset::Default => UNetArch::default(),
                    ArchPreset::Desk => UNetArch::desk(),
                };
                cfg.train.patch_frames = cfg.arch.patch_frames;
            }
            let t = &mut cfg.train;
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.lr = a.lr.unwrap_or(t.lr);
            t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
            if a.patches_per_track.is_some() {
                t.patches_per_track = a.patches_per_track;
            }
            cfg.arch.validate().map_err(invalid)?;
            cfg.train.validate(&cfg.arch).map_err(invalid)?;
        }
        Command::SynthFixture(a) => {
            if let Some(p) = a.profile {
                cfg.fixture_profile = p;
            }
            if a.duration.is_some() {
                cfg.fixture_duration = a.duration;
            }
            if cfg.fixture_duration.is_some_and(|d| !(d > 0.05 && d.is_finite())) {
                return Err(invalid("fixture duration must exceed 0.05 s"));
            }
        }
        Command::Separate(a) => {
            let missing: Vec<String> = a.input.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
            if !missing.is_empty() {
                return Err(invalid(format!("input files not found: {}", missing.join(", "))));
            }
        }
        Command::Evaluate(_) | Command::Report => {}
    }

    let _lock = Lock::acquire(&out)?;
    write_json(&out.join("effective_config.json"), &cfg)?;
    match cli.command {
        Command::Scan(_) => cmd_scan(&cfg, &out),
        Command::Splits(_) => cmd_splits(&cfg, &out),
        Command::Generate(_) => cmd_generate(&cfg, &out),
        Command::Train(_) => cmd_train(&cfg, &out),
        Command::Separate(a) => cmd_separate(&cfg, &out, a),
        Command::Evaluate(a) => cmd_evaluate(&out, a),
        Command::Report => cmd_report(&out),
        Command::SynthFixture(_) => cmd_fixture(&cfg, &out),
    }
}

fn cmd_scan(cfg: &PipelineConfig, out: &Path) -> Result<String, CliError> {
    let root = cfg.corpus_root.as_ref().expect("validated");
    let corpus = scan_corpus(root, cfg.manifest.as_deref())
        .map_err(runtime)?
        .with_target(&cfg.target_instrument);
    write_json(&out.join(CORPUS_FILE), &corpus)?;
    Ok(format!(
        "scanned {} stems: {} instruments, {} styles, {} {} stems; {} skipped",
        corpus.records.len(),
        corpus.instruments().len(),
        corpus.styles().len(),
        corpus.target_records().count(),
        corpus.target_instrument,
        corpus.skipped.len()
    ))
}

fn cmd_splits(cfg: &PipelineConfig, out: &Path) -> Result<String, CliError> {
    let corpus: Corpus = read_json(&out.join(CORPUS_FILE), "scan")?;
    let assigned = allocate_splits(&corpus, cfg.target_counts, cfg.other_ratios, cfg.seed).map_err(invalid)?;
    let checksum = SplitFile::from_corpus(&assigned, cfg.seed)
        .save(&out.join(SPLITS_FILE))
        .map_err(runtime)?;
    let all = assigned.split_counts(None);
    let target = assigned.split_counts(Some(&assigned.target_instrument));
    Ok(format!(
        "split {} stems {}/{}/{} ({} {}/{}/{}), checksum {}",
        assigned.records.len(),
        all.train,
        all.valid,
        all.test,
        assigned.target_instrument,
        target.train,
        target.valid,
        target.test,
        &checksum[..12]
    ))
}

fn load_split_corpus(out: &Path) -> Result<(Corpus, CorpusRef), CliError> {
    let corpus: Corpus = read_json(&out.join(CORPUS_FILE), "scan")?;
    let split_path = out.join(SPLITS_FILE);
    let file = SplitFile::load(&split_path).map_err(|e| invalid(format!("{e}; run `splits` first")))?;
    let bytes = std::fs::read(&split_path).map_err(runtime)?;
    let corpus = file.apply(&corpus, &split_path).map_err(invalid)?;
    let reference = CorpusRef {
        root: corpus.root.clone(),
        split_file: Some(split_path),
        split_checksum: Some(crate::corpus::sha256_hex(&bytes)),
    };
    Ok((corpus, reference))
}

fn cmd_generate(cfg: &PipelineConfig, out: &Path) -> Result<String, CliError> {
    let (corpus, reference) = load_split_corpus(out)?;
    if corpus.target_records().next().is_none() {
        return Err(invalid(format!("corpus has no {} stems", corpus.target_instrument)));
    }
    let dir = out.join(DATASET_DIR);
    let m = generate_dataset(&corpus, cfg.mixture_counts, cfg.seed, &dir, reference).map_err(runtime)?;
    Ok(format!(
        "generated {} mixtures ({}/{}/{}) in {}",
        m.specs.len(),
        m.counts.train,
        m.counts.valid,
        m.counts.test,
        dir.display()
    ))
}

fn load_manifest(out: &Path) -> Result<DatasetManifest, CliError> {
    let path = out.join(DATASET_DIR).join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(invalid(format!("{} not found; run `generate` first", path.display())));
    }
    DatasetManifest::load(&path).map_err(invalid)
}

fn cmd_train(cfg: &PipelineConfig, out: &Path) -> Result<String, CliError> {
    let manifest = load_manifest(out)?;
    let result = train(&manifest, &out.join(DATASET_DIR), &cfg.arch, &cfg.train, &out.join(TRAIN_DIR)).map_err(runtime)?;
    let last = result.log.last().expect("at least one epoch");
    Ok(format!(
        "trained {} epochs: final train loss {:.6}, best valid loss {:.6} at epoch {} -> {}",
        last.epoch,
        last.train_loss,
        result.best_valid_loss,
        result.best_epoch,
        result.best.display()
    ))
}

fn cmd_separate(cfg: &PipelineConfig, out: &Path, a: SeparateArgs) -> Result<String, CliError> {
    let ck = a.checkpoint.unwrap_or_else(|| out.join(TRAIN_DIR).join(BEST_CHECKPOINT));
    if !ck.is_file() {
        return Err(invalid(format!("checkpoint {} not found", ck.display())));
    }
    let net = load_model(&ck).map_err(runtime)?;
    let sep = cfg.separation.unwrap_or_else(|| SeparationConfig::for_arch(net.arch()));
    sep.validate(net.arch()).map_err(invalid)?;
    let estimates = out.join(ESTIMATES_DIR);
    if !a.input.is_empty() {
        let dir = estimates.join("input");
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        for path in &a.input {
            let mix = read_wav(path).map_err(runtime)?;
            let est = separate(&net, &mix, &sep).map_err(runtime)?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            write_wav(dir.join(format!("{name}.estimate.wav")), &est, WavEncoding::Float32).map_err(runtime)?;
        }
        return Ok(format!("separated {} files into {}", a.input.len(), dir.display()));
    }
    let manifest = load_manifest(out)?;
    let r = batch_separate(&manifest, &out.join(DATASET_DIR), a.split, &net, &sep, &estimates).map_err(runtime)?;
    if !r.failed.is_empty() {
        let list: Vec<String> = r.failed.iter().map(|(id, why)| format!("{id}: {why}")).collect();
        return Err(runtime(format!(
            "{} of {} entries failed:\n  {}",
            r.failed.len(),
            r.failed.len() + r.written.len(),
            list.join("\n  ")
        )));
    }
    Ok(format!("separated {} {} mixtures into {}", r.written.len(), a.split, estimates.display()))
}

fn cmd_evaluate(out: &Path, a: EvaluateArgs) -> Result<String, CliError> {
    let manifest = load_manifest(out)?;
    let dataset = out.join(DATASET_DIR);
    let report: EvalReport = if a.baseline {
        evaluate_mixture_baseline(&manifest, &dataset, a.split)
    } else {
        evaluate_split(&manifest, &dataset, a.split, &out.join(ESTIMATES_DIR))
    }
    .map_err(|e| match e {
        EvalError::MissingFiles(_) => invalid(format!("{e}\nrun `separate --split {}` first", a.split)),
        other => runtime(other),
    })?;
    let dir = out.join(EVAL_DIR);
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    let name = if a.baseline {
        format!("{}-baseline.json", a.split)
    } else {
        format!("{}.json", a.split)
    };
    std::fs::write(dir.join(&name), report.to_json()).map_err(runtime)?;
    Ok(format!(
        "{} {} tracks: median {:.2} dB, mean {:.2} dB -> {}",
        a.split,
        report.per_track.len(),
        report.median_db,
        report.mean_db,
        dir.join(name).display()
    ))
}

fn cmd_report(out: &Path) -> Result<String, CliError> {
    let dir = out.join(EVAL_DIR);
    let mut reports = Vec::new();
    for split in Split::ALL {
        let path = dir.join(format!("{split}.json"));
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(runtime)?;
            reports.push(EvalReport::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?);
        }
    }
    if reports.is_empty() {
        return Err(invalid(format!("no evaluations under {}; run `evaluate` first", dir.display())));
    }
    let table = format_report(&reports);
    std::fs::write(out.join(REPORT_FILE), &table).map_err(runtime)?;
    Ok(table.trim_end().to_string())
}

fn cmd_fixture(cfg: &PipelineConfig, out: &Path) -> Result<String, CliError> {
    let dir = out.join(FIXTURE_DIR);
    let s = synth_fixture(&dir, cfg.fixture_profile, cfg.seed, cfg.fixture_duration).map_err(runtime)?;
    Ok(format!(
        "wrote {} stems ({} instruments, {} styles) to {}",
        s.stems,
        s.instruments,
        s.styles,
        dir.display()
    ))
}
