//! Canonical mono waveforms, RIFF/WAVE I/O and band-limited resampling.

mod resample;
mod wav;

pub use resample::resample;
pub use wav::{read_wav, wav_info, write_wav, WavEncoding, WavError, WavInfo, WriteReport};

/// Internal sample rate every pipeline stage assumes after ingestion.
pub const CANONICAL_RATE: u32 = 44_100;

/// Mono audio at a fixed sample rate.
///
/// Samples are finite and nominally in `[-1, 1]`; the rate is always positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WaveformError {
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, WaveformError> {
        if sample_rate == 0 {
            return Err(WaveformError::ZeroRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(WaveformError::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self, WaveformError> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Keeps the first `len` samples (no-op when already shorter).
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.samples.len());
        Self {
            samples: self.samples[..len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }
}
