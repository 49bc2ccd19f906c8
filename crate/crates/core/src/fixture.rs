//! Procedural percussion corpus for demos and tests.
//!
//! Surdo stems are decaying low sines (60 to 120 Hz fundamentals) struck on
//! the beat. Accompaniment stems are band-limited noise bursts, bright
//! clicks and bell tones, so the target is mostly alone below a few hundred
//! hertz, as with a real surdo.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, WavEncoding, WavError, Waveform, CANONICAL_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureProfile {
    /// 57 two-second stems: 3 styles, 4 surdo and 3 of each of 5 other instruments per style.
    Desk,
    /// 274 short stems over 10 instruments and 5 styles, 26 of them surdo.
    Brid,
}

impl FromStr for FixtureProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "brid" => Ok(Self::Brid),
            other => Err(format!("unknown fixture profile '{other}' (expected desk or brid)")),
        }
    }
}

const STYLES: [(&str, f64); 5] = [
    ("samba", 96.0),
    ("partido-alto", 88.0),
    ("samba-enredo", 132.0),
    ("marcha", 112.0),
    ("capoeira", 72.0),
];

const DESK_ACCOMPANIMENT: [&str; 5] = ["agogo", "caixa", "pandeiro", "shaker", "tamborim"];

const BRID_ACCOMPANIMENT: [&str; 9] = [
    "agogo", "caixa", "cuica", "pandeiro", "reco-reco", "repique", "shaker", "tamborim", "tanta",
];

/// `(style index, instrument, count)` for every group of a profile.
fn layout(profile: FixtureProfile) -> Vec<(usize, &'static str, usize)> {
    let mut out = Vec::new();
    match profile {
        FixtureProfile::Desk => {
            for s in 0..3 {
                out.push((s, "surdo", 4));
                for inst in DESK_ACCOMPANIMENT {
                    out.push((s, inst, 3));
                }
            }
        }
        FixtureProfile::Brid => {
            for s in 0..5 {
                out.push((s, "surdo", if s == 0 { 6 } else { 5 }));
            }
            // 45 groups: the first 23 get six stems, the rest five (248 total)
            let mut g = 0;
            for s in 0..5 {
                for inst in BRID_ACCOMPANIMENT {
                    out.push((s, inst, if g < 23 { 6 } else { 5 }));
                    g += 1;
                }
            }
        }
    }
    out
}

fn default_duration(profile: FixtureProfile) -> f64 {
    match profile {
        FixtureProfile::Desk => 2.0,
        FixtureProfile::Brid => 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub profile: FixtureProfile,
    pub stems: usize,
    pub instruments: usize,
    pub styles: usize,
    pub files: Vec<PathBuf>,
}

/// Writes the profile's stems into `out` as `NNN_instrument_style_bpm.wav`.
pub fn synth_fixture(
    out: &Path,
    profile: FixtureProfile,
    seed: u64,
    duration: Option<f64>,
) -> Result<FixtureSummary, WavError> {
    let secs = duration.unwrap_or_else(|| default_duration(profile));
    std::fs::create_dir_all(out).map_err(|source| WavError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    let mut instruments = std::collections::BTreeSet::new();
    let mut styles = std::collections::BTreeSet::new();
    let mut n = 0usize;
    for (style_idx, instrument, count) in layout(profile) {
        let (style, bpm) = STYLES[style_idx];
        instruments.insert(instrument);
        styles.insert(style);
        for _ in 0..count {
            n += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let samples = synth_stem(instrument, bpm, secs, &mut rng);
            let wave = Waveform::new(samples, CANONICAL_RATE).expect("finite synthesis");
            let path = out.join(format!("{n:03}_{instrument}_{style}_{bpm}.wav"));
            write_wav(&path, &wave, WavEncoding::Pcm16)?;
            files.push(path);
        }
    }
    Ok(FixtureSummary {
        profile,
        stems: files.len(),
        instruments: instruments.len(),
        styles: styles.len(),
        files,
    })
}

/// Second-order band-pass (constant peak gain), direct form I.
struct BandPass {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl BandPass {
    fn new(center: f64, q: f64) -> Self {
        let w = 2.0 * PI * center / CANONICAL_RATE as f64;
        let alpha = w.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w.cos() / a0, (1.0 - alpha) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn step(&mut self, v: f64) -> f64 {
        let out = self.b[0] * v + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [v, self.x[0]];
        self.y = [out, self.y[0]];
        out
    }
}

/// Onset times (seconds) on a grid of `per_beat` subdivisions, each kept with probability `density`.
fn onsets(bpm: f64, per_beat: usize, density: f64, secs: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let step = 60.0 / bpm / per_beat as f64;
    let mut t = 0.0;
    let mut i = 0;
    let mut out = Vec::new();
    while t < secs {
        if rng.gen::<f64>() < density {
            let accent = if i % per_beat == 0 { 1.0 } else { rng.gen_range(0.5..0.85) };
            out.push((t, accent));
        }
        i += 1;
        t = i as f64 * step;
    }
    out
}

/// Scales to the given RMS level, then down again if the peak would exceed `PEAK_CAP`.
fn normalize(mut v: Vec<f64>, rms: f64) -> Vec<f32> {
    let energy = v.iter().map(|s| s * s).sum::<f64>() / v.len().max(1) as f64;
    if energy > 0.0 {
        let mut gain = rms / energy.sqrt();
        let peak = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        gain = gain.min(PEAK_CAP / peak);
        for s in &mut v {
            *s *= gain;
        }
    }
    v.into_iter().map(|s| s as f32).collect()
}

const PEAK_CAP: f64 = 0.9;
const SURDO_RMS: f64 = 0.12;
const ACCOMPANIMENT_RMS: f64 = 0.1;

fn synth_stem(instrument: &str, bpm: f64, secs: f64, rng: &mut impl Rng) -> Vec<f32> {
    let sr = CANONICAL_RATE as f64;
    let len = (secs * sr).round() as usize;
    let mut out = vec![0.0f64; len];
    // add a decaying tone with a short downward glide at each onset
    let tone = |out: &mut [f64], hits: &[(f64, f64)], f0: f64, decay: f64, partials: &[(f64, f64)]| {
        for &(t0, amp) in hits {
            let start = (t0 * sr) as usize;
            let span = ((decay * 8.0) * sr) as usize;
            let mut phase = 0.0;
            for (k, o) in out.iter_mut().skip(start).take(span).enumerate() {
                let t = k as f64 / sr;
                let f = f0 * (1.0 + 0.25 * (-t / 0.02).exp());
                phase += 2.0 * PI * f / sr;
                let env = (-t / decay).exp();
                *o += amp * env * partials.iter().map(|(m, g)| g * (m * phase).sin()).sum::<f64>();
            }
        }
    };
    let noise = |out: &mut [f64], hits: &[(f64, f64)], center: f64, q: f64, decay: f64, rng: &mut dyn FnMut() -> f64| {
        let mut bp = BandPass::new(center, q);
        let mut env = 0.0;
        let mut next = 0;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            while next < hits.len() && hits[next].0 <= t {
                env = hits[next].1;
                next += 1;
            }
            *o += bp.step(env * rng());
            env *= (-1.0 / (decay * sr)).exp();
        }
    };
    let mut white = {
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        move || r.gen_range(-1.0..1.0)
    };
    let level;
    match instrument {
        "surdo" => {
            let f0 = rng.gen_range(60.0..120.0);
            let decay = rng.gen_range(0.12..0.25);
            let hits = onsets(bpm, 1, 1.0, secs, rng);
            tone(&mut out, &hits, f0, decay, &[(1.0, 1.0), (2.0, 0.15)]);
            level = SURDO_RMS;
        }
        "tanta" => {
            let hits = onsets(bpm, 2, 0.8, secs, rng);
            tone(&mut out, &hits, rng.gen_range(150.0..250.0), 0.08, &[(1.0, 1.0), (2.3, 0.3)]);
            level = ACCOMPANIMENT_RMS;
        }
        "repique" => {
            let hits = onsets(bpm, 4, 0.6, secs, rng);
            tone(&mut out, &hits, rng.gen_range(300.0..500.0), 0.05, &[(1.0, 1.0), (1.6, 0.4)]);
            noise(&mut out, &hits, 2500.0, 1.0, 0.02, &mut white);
            level = ACCOMPANIMENT_RMS;
        }
        "agogo" => {
            let f = rng.gen_range(700.0..900.0);
            let hits = onsets(bpm, 2, 0.9, secs, rng);
            let (hi, lo): (Vec<_>, Vec<_>) = hits.iter().enumerate().partition(|(i, _)| i % 2 == 0);
            let hi: Vec<_> = hi.into_iter().map(|(_, h)| *h).collect();
            let lo: Vec<_> = lo.into_iter().map(|(_, h)| *h).collect();
            tone(&mut out, &hi, f * 1.5, 0.08, &[(1.0, 1.0), (2.7, 0.3)]);
            tone(&mut out, &lo, f, 0.08, &[(1.0, 1.0), (2.7, 0.3)]);
            level = ACCOMPANIMENT_RMS;
        }
        "tamborim" => {
            let hits = onsets(bpm, 4, 0.7, secs, rng);
            tone(&mut out, &hits, rng.gen_range(3000.0..4500.0), 0.01, &[(1.0, 1.0)]);
            level = ACCOMPANIMENT_RMS;
        }
        "cuica" => {
            let hits = onsets(bpm, 2, 0.7, secs, rng);
            tone(&mut out, &hits, rng.gen_range(500.0..900.0), 0.12, &[(1.0, 1.0), (2.0, 0.5)]);
            level = ACCOMPANIMENT_RMS;
        }
        "caixa" => {
            let hits = onsets(bpm, 4, 0.85, secs, rng);
            noise(&mut out, &hits, rng.gen_range(2000.0..3500.0), 0.8, 0.04, &mut white);
            level = ACCOMPANIMENT_RMS;
        }
        "shaker" => {
            let hits = onsets(bpm, 4, 1.0, secs, rng);
            noise(&mut out, &hits, rng.gen_range(6000.0..9000.0), 1.2, 0.06, &mut white);
            level = ACCOMPANIMENT_RMS;
        }
        "reco-reco" => {
            let hits = onsets(bpm, 8, 0.9, secs, rng);
            noise(&mut out, &hits, 4000.0, 2.0, 0.015, &mut white);
            level = ACCOMPANIMENT_RMS;
        }
        "pandeiro" => {
            let hits = onsets(bpm, 4, 0.8, secs, rng);
            noise(&mut out, &hits, rng.gen_range(5000.0..7000.0), 1.5, 0.05, &mut white);
            tone(&mut out, &hits, rng.gen_range(900.0..1200.0), 0.02, &[(1.0, 0.6)]);
            level = ACCOMPANIMENT_RMS;
        }
        other => {
            // unknown labels: broadband clicks
            let hits = onsets(bpm, 2, 0.8, secs, rng);
            let center = 1000.0 + (other.len() as f64 * 317.0) % 4000.0;
            noise(&mut out, &hits, center, 1.0, 0.03, &mut white);
            level = ACCOMPANIMENT_RMS;
        }
    }
    normalize(out, level)
}
