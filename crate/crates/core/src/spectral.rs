//! Short-time Fourier transform with exact overlap-add inversion.
//!
//! Frames are centred: the signal is zero-padded by half a window on both
//! sides, so frame `t` is centred on sample `t * hop`. Inversion divides the
//! overlap-added, window-weighted frames by the summed squared window, which
//! makes `istft(stft(x)) == x` up to rounding for any length.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpectralError {
    #[error("window size {0} must be a power of two and at least 16")]
    WindowSize(usize),
    #[error("hop {hop} must equal window_size / 4 ({expected})")]
    Hop { hop: usize, expected: usize },
    #[error("cannot transform an empty waveform")]
    Empty,
    #[error("spectrogram dimensions mismatch: {0}")]
    Dimensions(String),
}

/// Analysis/synthesis parameters. Only periodic Hann with 75% overlap is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    window_size: usize,
    hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn new(window_size: usize) -> Result<Self, SpectralError> {
        Self::with_hop(window_size, window_size / 4)
    }

    pub fn with_hop(window_size: usize, hop: usize) -> Result<Self, SpectralError> {
        if window_size < 16 || !window_size.is_power_of_two() {
            return Err(SpectralError::WindowSize(window_size));
        }
        if hop != window_size / 4 {
            return Err(SpectralError::Hop {
                hop,
                expected: window_size / 4,
            });
        }
        Ok(Self { window_size, hop })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn freq_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size as f64;
        (0..self.window_size)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }
}

/// Magnitude and phase, both stored bin-major (`[bin * frames + frame]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    magnitude: Vec<f64>,
    phase: Vec<f64>,
    bins: usize,
    frames: usize,
    config: StftConfig,
    original_length: usize,
}

impl Spectrogram {
    pub fn from_parts(
        magnitude: Vec<f64>,
        phase: Vec<f64>,
        frames: usize,
        config: StftConfig,
        original_length: usize,
    ) -> Result<Self, SpectralError> {
        let bins = config.freq_bins();
        if magnitude.len() != bins * frames || phase.len() != bins * frames {
            return Err(SpectralError::Dimensions(format!(
                "expected {bins}x{frames}, got magnitude {} and phase {} entries",
                magnitude.len(),
                phase.len()
            )));
        }
        if frames != config.frames_for(original_length) {
            return Err(SpectralError::Dimensions(format!(
                "{frames} frames cannot describe {original_length} samples"
            )));
        }
        if magnitude.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(SpectralError::Dimensions(
                "magnitude must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            magnitude,
            phase,
            bins,
            frames,
            config,
            original_length,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn mag(&self, bin: usize, frame: usize) -> f64 {
        self.magnitude[bin * self.frames + frame]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude.iter().copied().fold(0.0, f64::max)
    }

    pub fn complex(&self, bin: usize, frame: usize) -> Complex64 {
        let i = bin * self.frames + frame;
        Complex64::from_polar(self.magnitude[i], self.phase[i])
    }

    /// Same phase, new magnitude.
    pub fn with_magnitude(&self, magnitude: Vec<f64>) -> Result<Self, SpectralError> {
        Self::from_parts(
            magnitude,
            self.phase.clone(),
            self.frames,
            self.config,
            self.original_length,
        )
    }
}

fn planned(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(size)
    } else {
        planner.plan_fft_forward(size)
    }
}

/// Forward transform.
pub fn stft(wave: &Waveform, cfg: StftConfig) -> Result<Spectrogram, SpectralError> {
    if wave.is_empty() {
        return Err(SpectralError::Empty);
    }
    let n = cfg.window_size;
    let half = n / 2;
    let bins = cfg.freq_bins();
    let frames = cfg.frames_for(wave.len());
    let window = cfg.window();
    let fft = planned(n, false);

    let mut padded = vec![0.0f64; wave.len() + n];
    for (dst, &s) in padded[half..].iter_mut().zip(wave.samples()) {
        *dst = s as f64;
    }

    let mut magnitude = vec![0.0; bins * frames];
    let mut phase = vec![0.0; bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf[..bins].iter().enumerate() {
            magnitude[k * frames + t] = c.norm();
            let mut p = c.arg();
            if p <= -PI {
                p = PI;
            }
            phase[k * frames + t] = p;
        }
    }
    Ok(Spectrogram {
        magnitude,
        phase,
        bins,
        frames,
        config: cfg,
        original_length: wave.len(),
    })
}

/// Weighted overlap-add inverse, trimmed to the recorded original length.
pub fn istft(spec: &Spectrogram, sample_rate: u32) -> Result<Waveform, SpectralError> {
    let cfg = spec.config;
    let n = cfg.window_size;
    let half = n / 2;
    if spec.bins != cfg.freq_bins()
        || spec.magnitude.len() != spec.phase.len()
        || spec.magnitude.len() != spec.bins * spec.frames
    {
        return Err(SpectralError::Dimensions(
            "magnitude/phase do not match the transform configuration".into(),
        ));
    }
    let window = cfg.window();
    let ifft = planned(n, true);
    let padded_len = (spec.frames - 1) * cfg.hop + n;
    let mut acc = vec![0.0f64; padded_len];
    let mut weight = vec![0.0f64; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let scale = 1.0 / n as f64;

    for t in 0..spec.frames {
        for k in 0..spec.bins {
            buf[k] = spec.complex(k, t);
        }
        // Hermitian extension; DC and Nyquist must be real
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        for k in 1..half {
            buf[n - k] = buf[k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re * scale * window[i];
            weight[start + i] += window[i] * window[i];
        }
    }

    let samples = (0..spec.original_length)
        .map(|i| {
            let w = weight[i + half];
            if w > 1e-10 {
                (acc[i + half] / w) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples, sample_rate).expect("finite inverse"))
}
