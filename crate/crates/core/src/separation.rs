//! Full-track inference: tiled mask prediction, soft masking with the
//! mixture's phase, and inverse transform.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, WavEncoding, WavError, Waveform};
use crate::bsseval::estimate_path;
use crate::corpus::Split;
use crate::mixgen::{mixture_dir, DatasetManifest};
use crate::spectral::{istft, stft, SpectralError, Spectrogram, StftConfig};
use crate::tensor::{Checkpoint, CheckpointError, Tensor};
use crate::unet::{UNet, UNetArch, UNetError};

/// Guards ratio masks against division by zero.
pub const RATIO_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum SeparationError {
    #[error("invalid separation config: {0}")]
    Config(String),
    #[error("mixture is empty")]
    Empty,
    #[error("mask has {got} values, spectrogram {want}")]
    MaskSize { got: usize, want: usize },
    #[error(transparent)]
    Model(#[from] UNetError),
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparationConfig {
    pub tile_frames: usize,
    pub tile_overlap: usize,
    /// Tiles per forward pass.
    pub batch: usize,
    pub stft: StftConfig,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            tile_frames: 128,
            tile_overlap: 64,
            batch: 8,
            stft: StftConfig::default(),
        }
    }
}

impl SeparationConfig {
    /// Tiles as wide as the model's training patches, overlapping by half.
    pub fn for_arch(arch: &UNetArch) -> Self {
        Self {
            tile_frames: arch.patch_frames,
            tile_overlap: arch.patch_frames / 2,
            ..Self::default()
        }
    }

    pub fn validate(&self, arch: &UNetArch) -> Result<(), SeparationError> {
        if self.tile_overlap >= self.tile_frames {
            return Err(SeparationError::Config(format!(
                "overlap {} must be below tile width {}",
                self.tile_overlap, self.tile_frames
            )));
        }
        let unit = 1 << arch.depth();
        if !self.tile_frames.is_multiple_of(unit) {
            return Err(SeparationError::Config(format!(
                "tile width {} is not a multiple of {unit}",
                self.tile_frames
            )));
        }
        if arch.patch_bins > self.stft.freq_bins() {
            return Err(SeparationError::Config(format!(
                "model needs {} bins, transform has {}",
                arch.patch_bins,
                self.stft.freq_bins()
            )));
        }
        if self.batch == 0 {
            return Err(SeparationError::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Tile start frames: a fixed stride of `tile - overlap`, the last tile reaching the end.
pub fn tile_offsets(frames: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let stride = tile - overlap;
    let mut out = vec![0];
    while out.last().expect("non-empty") + tile < frames {
        out.push(out.last().expect("non-empty") + stride);
    }
    out
}

/// Blend weight of frame `j` in a tile; ramps only where a neighbour overlaps.
fn tile_weight(j: usize, tile: usize, overlap: usize, first: bool, last: bool) -> f64 {
    let ramp = |k: usize| {
        let x = (k as f64 + 0.5) / overlap as f64;
        0.5 - 0.5 * (PI * x).cos()
    };
    let mut w = 1.0;
    if overlap > 0 && !first && j < overlap {
        w *= ramp(j);
    }
    if overlap > 0 && !last && j >= tile - overlap {
        w *= ramp(tile - 1 - j);
    }
    w
}

/// Full-size mask (`bins x frames`, bin-major) predicted tile by tile.
pub fn predict_mask(net: &UNet<f32>, spec: &Spectrogram, cfg: &SeparationConfig) -> Result<Vec<f64>, SeparationError> {
    let arch = net.arch();
    cfg.validate(arch)?;
    let (bins, frames) = (spec.bins(), spec.frames());
    let rows = arch.patch_bins;
    let (tile, overlap) = (cfg.tile_frames, cfg.tile_overlap);
    let max = spec.max_magnitude();
    let scale = if max > 0.0 { max } else { 1.0 };
    let mag = spec.magnitude();

    let offsets = tile_offsets(frames, tile, overlap);
    let mut acc = vec![0.0f64; rows * frames];
    let mut weight = vec![0.0f64; frames];
    for (chunk_idx, chunk) in offsets.chunks(cfg.batch).enumerate() {
        let mut data = vec![0.0f32; chunk.len() * rows * tile];
        for (t, &off) in chunk.iter().enumerate() {
            let avail = frames.saturating_sub(off).min(tile);
            for b in 0..rows {
                let dst = t * rows * tile + b * tile;
                let src = b * frames + off;
                for j in 0..avail {
                    data[dst + j] = (mag[src + j] / scale) as f32;
                }
            }
        }
        let input = Tensor::new(&[chunk.len(), 1, rows, tile], data).expect("tile batch");
        let masks = net.predict(&input)?;
        for (t, &off) in chunk.iter().enumerate() {
            let index = chunk_idx * cfg.batch + t;
            let (first, last) = (index == 0, index + 1 == offsets.len());
            let avail = frames.saturating_sub(off).min(tile);
            for j in 0..avail {
                let w = tile_weight(j, tile, overlap, first, last);
                weight[off + j] += w;
                for b in 0..rows {
                    acc[b * frames + off + j] += w * masks.data()[t * rows * tile + b * tile + j] as f64;
                }
            }
        }
    }
    let mut mask = vec![0.0f64; bins * frames];
    for b in 0..bins {
        // rows above the modeled band reuse the top modeled row
        let src = b.min(rows - 1);
        for f in 0..frames {
            mask[b * frames + f] = acc[src * frames + f] / weight[f];
        }
    }
    Ok(mask)
}

/// Applies `mask` to the mixture magnitude, keeps the mixture phase, inverts.
pub fn apply_mask(mixture: &Waveform, spec: &Spectrogram, mask: &[f64]) -> Result<Waveform, SeparationError> {
    if mask.len() != spec.magnitude().len() {
        return Err(SeparationError::MaskSize {
            got: mask.len(),
            want: spec.magnitude().len(),
        });
    }
    let mag = spec.magnitude().iter().zip(mask).map(|(m, k)| m * k).collect();
    Ok(istft(&spec.with_magnitude(mag)?, mixture.sample_rate())?)
}

/// Separation with an externally supplied mask (built from the mixture spectrogram).
pub fn separate_with_mask(
    mixture: &Waveform,
    stft_cfg: StftConfig,
    mask: impl FnOnce(&Spectrogram) -> Vec<f64>,
) -> Result<Waveform, SeparationError> {
    if mixture.is_empty() {
        return Err(SeparationError::Empty);
    }
    let spec = stft(mixture, stft_cfg)?;
    let m = mask(&spec);
    apply_mask(mixture, &spec, &m)
}

/// Ideal ratio mask `|T| / (|T| + |O| + eps)` from the true sources.
pub fn ideal_ratio_mask(target: &Waveform, other: &Waveform, cfg: StftConfig) -> Result<Vec<f64>, SeparationError> {
    let t = stft(target, cfg)?;
    let o = stft(other, cfg)?;
    Ok(t.magnitude()
        .iter()
        .zip(o.magnitude())
        .map(|(a, b)| a / (a + b + RATIO_EPS))
        .collect())
}

pub fn separate(net: &UNet<f32>, mixture: &Waveform, cfg: &SeparationConfig) -> Result<Waveform, SeparationError> {
    if mixture.is_empty() {
        return Err(SeparationError::Empty);
    }
    let spec = stft(mixture, cfg.stft)?;
    let mask = predict_mask(net, &spec, cfg)?;
    apply_mask(mixture, &spec, &mask)
}

pub fn load_model(checkpoint: &Path) -> Result<UNet<f32>, SeparationError> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    Ok(UNet::from_checkpoint(&ck, None)?)
}

#[derive(Debug, Clone, Default)]
pub struct BatchResult {
    pub written: Vec<(String, PathBuf)>,
    /// Entries that could not be processed, with the reason.
    pub failed: Vec<(String, String)>,
}

/// Separates every mixture of `split`, writing `<out>/<split>/<id>/estimate.wav`.
pub fn batch_separate(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
    net: &UNet<f32>,
    cfg: &SeparationConfig,
    out: &Path,
) -> Result<BatchResult, SeparationError> {
    cfg.validate(net.arch())?;
    let mut result = BatchResult::default();
    for spec in manifest.split_specs(split) {
        let dest = estimate_path(out, split, &spec.mixture_id);
        let run = || -> Result<(), SeparationError> {
            let mix = read_wav(mixture_dir(dataset_dir, spec).join("mixture.wav"))?;
            let est = separate(net, &mix, cfg)?;
            let dir = dest.parent().expect("estimate directory");
            std::fs::create_dir_all(dir).map_err(|source| SeparationError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            write_wav(&dest, &est, WavEncoding::Float32)?;
            Ok(())
        };
        match run() {
            Ok(()) => result.written.push((spec.mixture_id.clone(), dest)),
            Err(e) => {
                log::warn!("{}: {e}", spec.mixture_id);
                result.failed.push((spec.mixture_id.clone(), e.to_string()));
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_cover_the_track() {
        assert_eq!(tile_offsets(128, 128, 64), vec![0]);
        assert_eq!(tile_offsets(129, 128, 64), vec![0, 64]);
        assert_eq!(tile_offsets(300, 128, 64), vec![0, 64, 128, 192]);
        assert_eq!(tile_offsets(256, 128, 0), vec![0, 128]);
        assert_eq!(tile_offsets(5, 128, 64), vec![0]);
    }

    #[test]
    fn cross_fade_weights_sum_to_one() {
        let (tile, overlap) = (16, 8);
        let mut sum = vec![0.0; 40];
        let offs = tile_offsets(40, tile, overlap);
        for (i, &o) in offs.iter().enumerate() {
            for j in 0..tile.min(40 - o) {
                sum[o + j] += tile_weight(j, tile, overlap, i == 0, i + 1 == offs.len());
            }
        }
        assert!(sum.iter().all(|s| (s - 1.0).abs() < 1e-12), "{sum:?}");
    }

    #[test]
    fn identity_and_zero_masks() {
        let x = Waveform::new((0..5000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect(), 44_100).unwrap();
        let cfg = StftConfig::default();
        let same = separate_with_mask(&x, cfg, |s| vec![1.0; s.magnitude().len()]).unwrap();
        let num: f64 = x.samples().iter().zip(same.samples()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        assert!((num / x.energy()).sqrt() <= 1e-6);
        let silent = separate_with_mask(&x, cfg, |s| vec![0.0; s.magnitude().len()]).unwrap();
        assert_eq!(silent.len(), x.len());
        assert!(silent.samples().iter().all(|&v| v == 0.0));
        assert!(separate_with_mask(&x, cfg, |_| vec![1.0; 3]).is_err());
    }
}
