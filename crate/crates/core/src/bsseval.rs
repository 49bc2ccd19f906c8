//! Projection-based source-to-distortion ratio and split statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, WavError, Waveform};
use crate::corpus::Split;
use crate::mixgen::{mixture_dir, DatasetManifest};

/// Recorded in every report so numbers from different definitions never mix.
pub const SDR_VARIANT: &str = "sdr-global-gain-v1";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("reference is empty")]
    Empty,
    #[error("reference is all zeros")]
    SilentReference,
    #[error("missing files:\n  {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n  "))]
    MissingFiles(Vec<PathBuf>),
    #[error("{id}: {source}")]
    Track { id: String, source: Box<EvalError> },
    #[error(transparent)]
    Wav(#[from] WavError),
}

/// SDR in dB of `estimate` against `reference`.
///
/// The estimate is split into its orthogonal projection onto the reference
/// and a residual. Zero residual gives `+inf`; a silent estimate gives `-inf`.
pub fn sdr_values(reference: &[f64], estimate: &[f64]) -> Result<f64, EvalError> {
    if reference.len() != estimate.len() {
        return Err(EvalError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    if reference.is_empty() {
        return Err(EvalError::Empty);
    }
    let ss: f64 = reference.iter().map(|s| s * s).sum();
    if ss == 0.0 {
        return Err(EvalError::SilentReference);
    }
    if estimate.iter().all(|&e| e == 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let gain = reference.iter().zip(estimate).map(|(s, e)| s * e).sum::<f64>() / ss;
    let (mut target, mut distortion) = (0.0, 0.0);
    for (&s, &e) in reference.iter().zip(estimate) {
        let t = gain * s;
        target += t * t;
        distortion += (e - t) * (e - t);
    }
    if distortion == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / distortion).log10())
}

pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64, EvalError> {
    let r: Vec<f64> = reference.samples().iter().map(|&v| v as f64).collect();
    let e: Vec<f64> = estimate.samples().iter().map(|&v| v as f64).collect();
    sdr_values(&r, &e)
}

/// Serializes non-finite numbers as the strings `inf`, `-inf` and `nan`.
mod flagged {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(super::render(*v).as_str())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

fn render(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.2}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub mixture_id: String,
    #[serde(with = "flagged")]
    pub sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub split: Split,
    pub per_track: Vec<TrackScore>,
    /// Mean over finite scores.
    #[serde(with = "flagged")]
    pub mean_db: f64,
    /// Sample (n - 1) standard deviation over finite scores.
    #[serde(with = "flagged")]
    pub sd_db: f64,
    /// Median over all scores, infinities included.
    #[serde(with = "flagged")]
    pub median_db: f64,
    /// Scores excluded from mean and SD.
    pub non_finite: usize,
    /// Fewer than two finite scores: `sd_db` is reported as 0.
    pub sd_undefined: bool,
}

impl EvalReport {
    pub fn from_scores(split: Split, per_track: Vec<TrackScore>) -> Self {
        let finite: Vec<f64> = per_track.iter().map(|t| t.sdr_db).filter(|v| v.is_finite()).collect();
        let non_finite = per_track.len() - finite.len();
        let mut all: Vec<f64> = per_track.iter().map(|t| t.sdr_db).collect();
        all.sort_by(f64::total_cmp);
        let median_db = match all.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => all[n / 2],
            n => 0.5 * (all[n / 2 - 1] + all[n / 2]),
        };
        let mean_db = if finite.is_empty() {
            // every score infinite: the mean is that infinity when they agree
            match (all.first(), all.last()) {
                (Some(&lo), Some(&hi)) if lo == hi => lo,
                _ => f64::NAN,
            }
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let sd_undefined = finite.len() < 2;
        let sd_db = if sd_undefined {
            0.0
        } else {
            let ss: f64 = finite.iter().map(|v| (v - mean_db).powi(2)).sum();
            (ss / (finite.len() - 1) as f64).sqrt()
        };
        Self {
            variant: SDR_VARIANT.to_string(),
            split,
            per_track,
            mean_db,
            sd_db,
            median_db,
            non_finite,
            sd_undefined,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One `(mixture_id, reference, estimate)` triple per track.
pub fn evaluate_files(split: Split, tracks: &[(String, PathBuf, PathBuf)]) -> Result<EvalReport, EvalError> {
    let missing: Vec<PathBuf> = tracks
        .iter()
        .flat_map(|(_, r, e)| [r, e])
        .filter(|p| !p.is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingFiles(missing));
    }
    let mut scores = Vec::with_capacity(tracks.len());
    for (id, r, e) in tracks {
        let at = |source: EvalError| EvalError::Track {
            id: id.clone(),
            source: Box::new(source),
        };
        let reference = read_wav(r).map_err(|e| at(e.into()))?;
        let estimate = read_wav(e).map_err(|e| at(e.into()))?;
        let v = sdr(&reference, &estimate).map_err(at)?;
        scores.push(TrackScore {
            mixture_id: id.clone(),
            sdr_db: v,
        });
    }
    Ok(EvalReport::from_scores(split, scores))
}

pub const ESTIMATE_FILE: &str = "estimate.wav";

/// Where separation writes the estimate for one dataset entry.
pub fn estimate_path(estimates: &Path, split: Split, mixture_id: &str) -> PathBuf {
    estimates.join(split.as_str()).join(mixture_id).join(ESTIMATE_FILE)
}

/// Scores `<estimates>/<split>/<id>/estimate.wav` against each rendered target.
pub fn evaluate_split(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
    estimates: &Path,
) -> Result<EvalReport, EvalError> {
    let tracks: Vec<_> = manifest
        .split_specs(split)
        .map(|s| {
            (
                s.mixture_id.clone(),
                mixture_dir(dataset_dir, s).join("target.wav"),
                estimate_path(estimates, split, &s.mixture_id),
            )
        })
        .collect();
    evaluate_files(split, &tracks)
}

/// Scores the unprocessed mixture as the estimate (all-ones mask).
pub fn evaluate_mixture_baseline(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
) -> Result<EvalReport, EvalError> {
    let tracks: Vec<_> = manifest
        .split_specs(split)
        .map(|s| {
            let dir = mixture_dir(dataset_dir, s);
            (s.mixture_id.clone(), dir.join("target.wav"), dir.join("mixture.wav"))
        })
        .collect();
    evaluate_files(split, &tracks)
}

fn split_title(split: Split) -> &'static str {
    match split {
        Split::Train => "Training",
        Split::Valid => "Validation",
        Split::Test => "Testing",
        Split::Unassigned => "Unassigned",
    }
}

/// `Dataset | Mean ± SD | Median` table, one row per report.
pub fn format_report(reports: &[EvalReport]) -> String {
    let mut out = String::from("Dataset | Mean ± SD | Median\n");
    for r in reports {
        out.push_str(&format!(
            "{} | {} ± {} | {}\n",
            split_title(r.split),
            render(r.mean_db),
            render(r.sd_db),
            render(r.median_db)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64]) -> Vec<TrackScore> {
        v.iter()
            .enumerate()
            .map(|(i, &s)| TrackScore {
                mixture_id: format!("m{i}"),
                sdr_db: s,
            })
            .collect()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(sdr_values(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.0);
        let s = [0.3, -1.2, 0.7];
        assert_eq!(sdr_values(&s, &s).unwrap(), f64::INFINITY);
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(sdr_values(&s, &twice).unwrap(), f64::INFINITY);
        assert_eq!(sdr_values(&s, &[0.0; 3]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(sdr_values(&[0.0; 2], &[1.0, 0.0]), Err(EvalError::SilentReference)));
        assert!(matches!(sdr_values(&[1.0], &[1.0, 0.0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(sdr_values(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn orthogonal_noise_gives_exact_ratio() {
        // s and n orthogonal with |n|^2 = |s|^2 / 10
        let s = [1.0, 1.0, 0.0, 0.0];
        let a = (0.2f64 / 2.0).sqrt();
        let est = [1.0 + a, 1.0 - a, 0.0, 0.0];
        assert!((sdr_values(&s, &est).unwrap() - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn statistics() {
        let r = EvalReport::from_scores(Split::Test, scores(&[20.0, 0.0, 10.0]));
        assert_eq!((r.mean_db, r.median_db, r.sd_db), (10.0, 10.0, 10.0));
        let one = EvalReport::from_scores(Split::Test, scores(&[4.5]));
        assert_eq!((one.mean_db, one.median_db, one.sd_db, one.sd_undefined), (4.5, 4.5, 0.0, true));
        let inf = EvalReport::from_scores(Split::Train, scores(&[f64::INFINITY; 2]));
        assert_eq!((inf.mean_db, inf.median_db, inf.non_finite), (f64::INFINITY, f64::INFINITY, 2));
        let mixed = EvalReport::from_scores(Split::Train, scores(&[1.0, 3.0, f64::INFINITY]));
        assert_eq!((mixed.mean_db, mixed.median_db, mixed.non_finite), (2.0, 3.0, 1));
    }

    #[test]
    fn table_layout() {
        let mut r = EvalReport::from_scores(Split::Train, vec![]);
        r.mean_db = 16.83;
        r.sd_db = 7.13;
        r.median_db = 16.97;
        assert_eq!(
            format_report(&[r]),
            "Dataset | Mean ± SD | Median\nTraining | 16.83 ± 7.13 | 16.97\n"
        );
        assert_eq!(format_report(&[]), "Dataset | Mean ± SD | Median\n");
        let inf = EvalReport::from_scores(Split::Test, scores(&[f64::INFINITY]));
        assert_eq!(format_report(&[inf]).lines().nth(1), Some("Testing | inf ± 0.00 | inf"));
    }

    #[test]
    fn json_round_trip_keeps_infinities() {
        let r = EvalReport::from_scores(Split::Valid, scores(&[f64::INFINITY, 3.0, f64::NEG_INFINITY]));
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().contains(SDR_VARIANT));
    }
}
