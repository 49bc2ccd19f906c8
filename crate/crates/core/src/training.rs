//! Magnitude-patch preparation and the masked-L1 training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, WavError};
use crate::corpus::Split;
use crate::mixgen::{mixture_dir, DatasetManifest};
use crate::spectral::{stft, SpectralError, Spectrogram, StftConfig};
use crate::tensor::{
    adam_step, l1_loss, l1_loss_backward, AdamConfig, AdamState, Checkpoint, CheckpointError, Tensor,
    TensorError,
};
use crate::unet::{UNet, UNetArch, UNetError};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const CONFIG_ECHO: &str = "train_config.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("frame count mismatch: mixture {mix}, target {target}")]
    FrameMismatch { mix: usize, target: usize },
    #[error("unreadable dataset entries:\n  {}", .0.join("\n  "))]
    Unreadable(Vec<String>),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] UNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patch_frames: usize,
    /// Random patches drawn per track each epoch; `None` uses the number of
    /// whole patches that fit in the track (at least one).
    pub patches_per_track: Option<usize>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 8,
            lr: 1e-4,
            patch_frames: 128,
            patches_per_track: None,
            seed: 0,
            checkpoint_every: 100,
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: &UNetArch) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be non-negative", self.lr));
        }
        if self.patch_frames != arch.patch_frames {
            return bad(format!(
                "patch_frames {} differs from the architecture's {}",
                self.patch_frames, arch.patch_frames
            ));
        }
        if arch.patch_bins > self.stft.freq_bins() {
            return bad(format!(
                "architecture needs {} bins, transform has {}",
                arch.patch_bins,
                self.stft.freq_bins()
            ));
        }
        if self.patches_per_track == Some(0) {
            return bad("patches_per_track must be positive".into());
        }
        Ok(())
    }
}

/// Normalized magnitudes of one rendered pair, cropped to the model's bins.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: String,
    pub bins: usize,
    pub frames: usize,
    /// Bin-major, divided by `scale`.
    pub mix: Vec<f32>,
    pub target: Vec<f32>,
    /// Maximum mixture magnitude, or 1 for a silent mixture.
    pub scale: f64,
}

impl Track {
    pub fn new(id: &str, mix: &Spectrogram, target: &Spectrogram, bins: usize) -> Result<Self, TrainError> {
        if mix.frames() != target.frames() || mix.bins() != target.bins() {
            return Err(TrainError::FrameMismatch {
                mix: mix.frames(),
                target: target.frames(),
            });
        }
        if bins > mix.bins() {
            return Err(TrainError::Config(format!("{bins} bins requested of {}", mix.bins())));
        }
        let max = mix.max_magnitude();
        let scale = if max > 0.0 { max } else { 1.0 };
        let frames = mix.frames();
        let crop = |s: &Spectrogram| -> Vec<f32> {
            s.magnitude()[..bins * frames].iter().map(|&m| (m / scale) as f32).collect()
        };
        Ok(Self {
            id: id.to_string(),
            bins,
            frames,
            mix: crop(mix),
            target: crop(target),
            scale,
        })
    }

    pub fn valid_offsets(&self, patch_frames: usize) -> usize {
        self.frames.saturating_sub(patch_frames) + 1
    }

    /// Copies frames `offset..offset + patch_frames`, zero-padding past the end.
    pub fn patch(&self, offset: usize, patch_frames: usize) -> PatchPair {
        let n = self.bins * patch_frames;
        let (mut mix, mut target) = (vec![0.0f32; n], vec![0.0f32; n]);
        let avail = self.frames.saturating_sub(offset).min(patch_frames);
        for b in 0..self.bins {
            let src = b * self.frames + offset;
            let dst = b * patch_frames;
            mix[dst..dst + avail].copy_from_slice(&self.mix[src..src + avail]);
            target[dst..dst + avail].copy_from_slice(&self.target[src..src + avail]);
        }
        let shape = [1, self.bins, patch_frames];
        PatchPair {
            mix: Tensor::new(&shape, mix).expect("patch shape"),
            target: Tensor::new(&shape, target).expect("patch shape"),
            scale: self.scale,
            track_id: self.id.clone(),
            offset,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchPair {
    pub mix: Tensor<f32>,
    pub target: Tensor<f32>,
    pub scale: f64,
    pub track_id: String,
    pub offset: usize,
}

/// Draws `count` random patches (offsets uniform over the valid range).
pub fn make_patches(
    mix: &Spectrogram,
    target: &Spectrogram,
    bins: usize,
    patch_frames: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PatchPair>, TrainError> {
    let track = Track::new("", mix, target, bins)?;
    Ok(draw_patches(&track, patch_frames, count, rng))
}

fn draw_patches(track: &Track, patch_frames: usize, count: usize, rng: &mut impl Rng) -> Vec<PatchPair> {
    let n = track.valid_offsets(patch_frames);
    (0..count)
        .map(|_| track.patch(rng.gen_range(0..n), patch_frames))
        .collect()
}

/// Non-overlapping patches covering the whole track, the last one padded.
fn tile_patches(track: &Track, patch_frames: usize) -> Vec<PatchPair> {
    (0..track.frames.div_ceil(patch_frames).max(1))
        .map(|i| track.patch(i * patch_frames, patch_frames))
        .collect()
}

/// Reads and transforms every rendered pair of a split, reporting all failures at once.
pub fn load_tracks(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
    stft_cfg: StftConfig,
    bins: usize,
) -> Result<Vec<Track>, TrainError> {
    let mut tracks = Vec::new();
    let mut failures = Vec::new();
    for spec in manifest.split_specs(split) {
        let dir = mixture_dir(dataset_dir, spec);
        let load = || -> Result<Track, TrainError> {
            let mix = stft(&read_wav(dir.join("mixture.wav"))?, stft_cfg)?;
            let target = stft(&read_wav(dir.join("target.wav"))?, stft_cfg)?;
            Track::new(&spec.mixture_id, &mix, &target, bins)
        };
        match load() {
            Ok(t) => tracks.push(t),
            Err(e) => failures.push(format!("{}: {e}", spec.mixture_id)),
        }
    }
    if !failures.is_empty() {
        return Err(TrainError::Unreadable(failures));
    }
    Ok(tracks)
}

fn stack(patches: &[&PatchPair]) -> (Tensor<f32>, Tensor<f32>) {
    let shape = patches[0].mix.shape();
    let dims = [patches.len(), 1, shape[1], shape[2]];
    let cat = |f: fn(&PatchPair) -> &Tensor<f32>| {
        let data = patches.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Tensor::new(&dims, data).expect("stacked patches")
    };
    (cat(|p| &p.mix), cat(|p| &p.target))
}

/// `mean |mask * mix - target|` and its gradient with respect to the mask.
pub fn masked_l1(mask: &Tensor<f32>, mix: &Tensor<f32>, target: &Tensor<f32>) -> Result<(f32, Tensor<f32>), TensorError> {
    let estimate = mask.zip_map(mix, |m, x| m * x)?;
    let loss = l1_loss(&estimate, target)?;
    let grad = l1_loss_backward(&estimate, target)?.zip_map(mix, |g, x| g * x)?;
    Ok((loss, grad))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    net: &mut UNet<f32>,
    adam: &mut AdamState<f32>,
    cfg: &AdamConfig,
    mix: &Tensor<f32>,
    target: &Tensor<f32>,
    rng: &mut impl Rng,
) -> Result<f32, TrainError> {
    let cache = net.forward_train(mix, rng)?;
    let (loss, grad) = masked_l1(cache.mask(), mix, target)?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    net.zero_grad();
    net.backward(&cache, &grad)?;
    adam_step(&mut net.parameters_mut(), adam, cfg)?;
    Ok(loss)
}

/// Eval-mode mean loss over patches, weighted by patch.
pub fn evaluate_loss(net: &UNet<f32>, patches: &[PatchPair], batch_size: usize) -> Result<f64, TrainError> {
    if patches.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in patches.chunks(batch_size) {
        let refs: Vec<&PatchPair> = chunk.iter().collect();
        let (mix, target) = stack(&refs);
        let mask = net.predict(&mix)?;
        let (loss, _) = masked_l1(&mask, &mix, &target)?;
        total += loss as f64 * chunk.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

pub fn adam_state_for(net: &UNet<f32>) -> AdamState<f32> {
    let params: Vec<&Tensor<f32>> = net.named_parameters().into_iter().map(|(_, t)| t).collect();
    AdamState::for_params(&params)
}

/// Model weights plus optimizer moments and progress counters.
pub fn training_checkpoint(
    net: &UNet<f32>,
    adam: &AdamState<f32>,
    epoch: usize,
    valid_loss: f64,
    cfg: &TrainConfig,
) -> Checkpoint<f32> {
    let mut ck = net.to_checkpoint(serde_json::json!({
        "epoch": epoch,
        "valid_loss": valid_loss,
        "adam_step": adam.step,
        "train_config": cfg,
    }));
    for (i, (name, t)) in net.named_parameters().into_iter().enumerate() {
        let m = Tensor::new(t.shape(), adam.first[i].clone()).expect("moment shape");
        let v = Tensor::new(t.shape(), adam.second[i].clone()).expect("moment shape");
        ck.push(format!("adam.m.{name}"), &m);
        ck.push(format!("adam.v.{name}"), &v);
    }
    ck
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Trains on the train split, validating on the valid split after every epoch.
///
/// Writes `loss_log.csv`, `train_config.json`, `epoch-NNNN.ckpt` every
/// `checkpoint_every` epochs, `best.ckpt` (lowest validation loss) and
/// `last.ckpt` under `out`.
pub fn train(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    arch: &UNetArch,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome, TrainError> {
    arch.validate()?;
    cfg.validate(arch)?;
    let train_tracks = load_tracks(manifest, dataset_dir, Split::Train, cfg.stft, arch.patch_bins)?;
    let valid_tracks = load_tracks(manifest, dataset_dir, Split::Valid, cfg.stft, arch.patch_bins)?;
    if train_tracks.is_empty() || valid_tracks.is_empty() {
        return Err(TrainError::Config("train and valid splits must both be non-empty".into()));
    }
    let valid: Vec<PatchPair> = valid_tracks.iter().flat_map(|t| tile_patches(t, cfg.patch_frames)).collect();

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join(CONFIG_ECHO);
    let echoed = serde_json::json!({ "arch": arch, "train": cfg });
    std::fs::write(&echo, serde_json::to_vec_pretty(&echoed).expect("json")).map_err(io_err(&echo))?;
    let log_path = out.join(LOSS_LOG);
    let mut log_file = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log_file, "epoch,train_loss,valid_loss").map_err(io_err(&log_path))?;

    let mut net = UNet::<f32>::new(arch.clone(), cfg.seed)?;
    let mut adam = adam_state_for(&net);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let best_path = out.join(BEST_CHECKPOINT);
    let last_path = out.join(LAST_CHECKPOINT);
    let mut best = (0, f64::INFINITY);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut patches: Vec<PatchPair> = Vec::new();
        for t in &train_tracks {
            let count = cfg
                .patches_per_track
                .unwrap_or_else(|| (t.frames / cfg.patch_frames).max(1));
            patches.extend(draw_patches(t, cfg.patch_frames, count, &mut rng));
        }
        patches.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in patches.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&PatchPair> = chunk.iter().collect();
            let (mix, target) = stack(&refs);
            let loss = train_step(&mut net, &mut adam, &adam_cfg, &mix, &target, &mut rng).map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { epoch, batch },
                other => TrainError::Step {
                    epoch,
                    batch,
                    source: Box::new(other),
                },
            })?;
            total += loss as f64 * chunk.len() as f64;
        }
        let train_loss = total / patches.len() as f64;
        let valid_loss = evaluate_loss(&net, &valid, cfg.batch_size)?;
        writeln!(log_file, "{epoch},{train_loss},{valid_loss}").map_err(io_err(&log_path))?;
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");

        let ck = training_checkpoint(&net, &adam, epoch, valid_loss, cfg);
        if valid_loss < best.1 {
            best = (epoch, valid_loss);
            ck.save(&best_path)?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            ck.save(out.join(format!("epoch-{epoch:04}.ckpt")))?;
        }
        if epoch == cfg.epochs {
            ck.save(&last_path)?;
        }
    }
    if !best.1.is_finite() {
        // validation never produced a finite loss; keep the final weights as best
        std::fs::copy(&last_path, &best_path).map_err(io_err(&best_path))?;
        best.0 = cfg.epochs;
    }
    log::info!("best validation loss {:.6} at epoch {}", best.1, best.0);
    Ok(TrainOutcome {
        last: last_path,
        best: best_path,
        best_epoch: best.0,
        best_valid_loss: best.1,
        log,
    })
}

/// Repeated steps on one fixed batch; returns the loss before every step.
pub fn overfit_probe(
    arch: &UNetArch,
    mix: &Tensor<f32>,
    target: &Tensor<f32>,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f32>, TrainError> {
    let mut net = UNet::<f32>::new(arch.clone(), seed)?;
    let mut adam = adam_state_for(&net);
    let cfg = AdamConfig::with_lr(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| train_step(&mut net, &mut adam, &cfg, mix, target, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;

    fn spec_of(samples: Vec<f32>) -> Spectrogram {
        stft(&Waveform::new(samples, 44_100).unwrap(), StftConfig::new(64).unwrap()).unwrap()
    }

    #[test]
    fn exact_length_track_has_one_offset() {
        // 64-sample window, hop 16: 16 * 7 samples give 8 frames
        let s = spec_of((0..112).map(|i| (i as f32 * 0.3).sin()).collect());
        assert_eq!(s.frames(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_patches(&s, &s, 32, 8, 5, &mut rng).unwrap();
        assert!(p.iter().all(|pp| pp.offset == 0));
        let max = p[0].mix.data().iter().copied().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn silent_mixture_has_unit_scale_and_zero_patches() {
        let s = spec_of(vec![0.0; 200]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_patches(&s, &s, 16, 4, 2, &mut rng).unwrap();
        assert_eq!(p[0].scale, 1.0);
        assert!(p.iter().all(|pp| pp.mix.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn short_track_is_zero_padded() {
        let s = spec_of((0..40).map(|i| 0.1 + (i as f32).cos()).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = &make_patches(&s, &s, 8, 8, 1, &mut rng).unwrap()[0];
        assert_eq!(s.frames(), 3);
        for b in 0..8 {
            assert!(p.mix.data()[b * 8 + 3..b * 8 + 8].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_frames_rejected() {
        let a = spec_of(vec![0.1; 100]);
        let b = spec_of(vec![0.1; 300]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_patches(&a, &b, 8, 4, 1, &mut rng),
            Err(TrainError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn zero_mix_and_target_give_zero_loss() {
        let z = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let mask = Tensor::full(&[1, 1, 4, 4], 0.3f32);
        assert_eq!(masked_l1(&mask, &z, &z).unwrap().0, 0.0);
    }

    #[test]
    fn config_validation() {
        let arch = UNetArch::desk();
        let mut cfg = TrainConfig {
            patch_frames: 64,
            ..Default::default()
        };
        assert!(cfg.validate(&arch).is_ok());
        cfg.patch_frames = 128;
        assert!(cfg.validate(&arch).is_err());
        cfg.patch_frames = 64;
        cfg.batch_size = 0;
        assert!(cfg.validate(&arch).is_err());
    }
}
