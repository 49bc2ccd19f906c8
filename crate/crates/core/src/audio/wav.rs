use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Waveform;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("audio file not found: {0}")]
    Missing(PathBuf),
    #[error("unsupported WAV encoding in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("corrupt or truncated WAV {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Sample encodings the writer can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Header facts read without decoding the sample data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub frames: usize,
}

impl WavInfo {
    pub fn duration_secs(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }
}

/// Outcome of a successful write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteReport {
    /// Samples outside `[-1, 1]` that were clipped (PCM-16 only).
    pub clipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleKind {
    Pcm16,
    Pcm24,
    Float32,
}

struct Parsed<'a> {
    info: WavInfo,
    kind: SampleKind,
    data: &'a [u8],
}

fn corrupt(path: &Path, detail: impl Into<String>) -> WavError {
    WavError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn unsupported(path: &Path, detail: impl Into<String>) -> WavError {
    WavError::Unsupported {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, WavError> {
    std::fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => WavError::Missing(path.to_path_buf()),
        _ => WavError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<Parsed<'a>, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(corrupt(path, "missing RIFF/WAVE header"));
    }
    let mut fmt: Option<(u16, u16, u32, u16, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            return Err(corrupt(path, format!("chunk header cut at byte {pos}")));
        }
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(corrupt(
                path,
                format!(
                    "chunk '{}' declares {size} bytes but only {} remain",
                    String::from_utf8_lossy(id),
                    bytes.len() - body
                ),
            ));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(corrupt(path, "fmt chunk shorter than 16 bytes"));
                }
                let c = &bytes[body..body + size];
                let mut format = u16_at(c, 0);
                if format == FORMAT_EXTENSIBLE {
                    if size < 26 {
                        return Err(corrupt(path, "extensible fmt chunk too short"));
                    }
                    format = u16_at(c, 24);
                }
                fmt = Some((format, u16_at(c, 2), u32_at(c, 4), u16_at(c, 12), u16_at(c, 14)));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }

    let (format, channels, sample_rate, block_align, bits) =
        fmt.ok_or_else(|| corrupt(path, "no fmt chunk"))?;
    let data = data.ok_or_else(|| corrupt(path, "no data chunk"))?;
    let kind = match (format, bits) {
        (FORMAT_PCM, 16) => SampleKind::Pcm16,
        (FORMAT_PCM, 24) => SampleKind::Pcm24,
        (FORMAT_FLOAT, 32) => SampleKind::Float32,
        _ => {
            return Err(unsupported(
                path,
                format!("format tag {format} with {bits} bits per sample"),
            ))
        }
    };
    if !(1..=2).contains(&channels) {
        return Err(unsupported(path, format!("{channels} channels")));
    }
    if sample_rate == 0 {
        return Err(corrupt(path, "zero sample rate"));
    }
    let frame_bytes = channels as usize * (bits as usize / 8);
    if block_align as usize != frame_bytes {
        return Err(corrupt(
            path,
            format!("block align {block_align} does not match {frame_bytes}"),
        ));
    }
    if data.len() % frame_bytes != 0 {
        return Err(corrupt(path, "data chunk holds a partial frame"));
    }
    Ok(Parsed {
        info: WavInfo {
            sample_rate,
            channels,
            bits_per_sample: bits,
            frames: data.len() / frame_bytes,
        },
        kind,
        data,
    })
}

/// Reads header metadata only.
pub fn wav_info(path: impl AsRef<Path>) -> Result<WavInfo, WavError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    Ok(parse(path, &bytes)?.info)
}

/// Reads a WAV file as a mono waveform; stereo is downmixed by the channel mean.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let parsed = parse(path, &bytes)?;
    let decoded: Vec<f32> = match parsed.kind {
        SampleKind::Pcm16 => parsed
            .data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect(),
        SampleKind::Pcm24 => parsed
            .data
            .chunks_exact(3)
            .map(|b| {
                // sign-extend via the top byte
                let v = i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8;
                v as f32 / 8_388_608.0
            })
            .collect(),
        SampleKind::Float32 => parsed
            .data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    };
    let samples = match parsed.info.channels {
        1 => decoded,
        _ => decoded
            .chunks_exact(2)
            .map(|lr| 0.5 * (lr[0] + lr[1]))
            .collect(),
    };
    Waveform::new(samples, parsed.info.sample_rate)
        .map_err(|e| corrupt(path, e.to_string()))
}

/// Writes a mono WAV file.
///
/// Under PCM-16, samples are scaled by 32768, rounded and clamped to the
/// 16-bit range; samples outside `[-1, 1]` are counted in the report.
pub fn write_wav(
    path: impl AsRef<Path>,
    wave: &Waveform,
    encoding: WavEncoding,
) -> Result<WriteReport, WavError> {
    let path = path.as_ref();
    let io_err = |source| WavError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut report = WriteReport::default();
    let n = wave.len();
    let (format, bits, fmt_size): (u16, u16, u32) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16, 16),
        WavEncoding::Float32 => (FORMAT_FLOAT, 32, 18),
    };
    let block_align = bits / 8;
    let data_bytes = n as u32 * block_align as u32;
    let fact_bytes: u32 = if encoding == WavEncoding::Float32 { 12 } else { 0 };
    let riff_size = 4 + (8 + fmt_size) + fact_bytes + (8 + data_bytes);

    let mut out = Vec::with_capacity(riff_size as usize + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_size.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&fmt_size.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate().to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    if fmt_size == 18 {
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    if fact_bytes > 0 {
        out.extend_from_slice(b"fact");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in wave.samples() {
                if s.abs() > 1.0 {
                    report.clipped += 1;
                }
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        WavEncoding::Float32 => {
            for &s in wave.samples() {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }

    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    if report.clipped > 0 {
        log::warn!("{}: clipped {} samples", path.display(), report.clipped);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Hand-built stereo/mono RIFF image with an extra unknown chunk.
    fn riff(format: u16, channels: u16, bits: u16, data: &[u8], extra_chunk: bool) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(b"WAVE");
        if extra_chunk {
            body.extend_from_slice(b"LIST");
            body.extend_from_slice(&3u32.to_le_bytes());
            body.extend_from_slice(b"abc\0");
        }
        body.extend_from_slice(b"fmt ");
        body.extend_from_slice(&16u32.to_le_bytes());
        body.extend_from_slice(&format.to_le_bytes());
        body.extend_from_slice(&channels.to_le_bytes());
        body.extend_from_slice(&44_100u32.to_le_bytes());
        let align = channels * bits / 8;
        body.extend_from_slice(&(44_100 * align as u32).to_le_bytes());
        body.extend_from_slice(&align.to_le_bytes());
        body.extend_from_slice(&bits.to_le_bytes());
        body.extend_from_slice(b"data");
        body.extend_from_slice(&(data.len() as u32).to_le_bytes());
        body.extend_from_slice(data);
        let mut out = b"RIFF".to_vec();
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend(body);
        out
    }

    fn pcm16(values: &[i16]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn silence_pcm16_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        std::fs::write(&p, riff(1, 1, 16, &pcm16(&vec![0; 44_100]), false)).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.sample_rate(), 44_100);
        assert_eq!(w.len(), 44_100);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn antiphase_stereo_downmixes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let frames: Vec<i16> = (0..100).flat_map(|_| [16384i16, -16384]).collect();
        std::fs::write(&p, riff(1, 2, 16, &pcm16(&frames), true)).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn downmix_is_linear() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<i16> = (0..64).map(|_| rng.gen()).collect();
        let b: Vec<i16> = (0..64).map(|_| rng.gen()).collect();
        let interleave = |l: &[i16], r: &[i16]| -> Vec<i16> {
            l.iter().zip(r).flat_map(|(&x, &y)| [x, y]).collect()
        };
        let write = |name: &str, frames: Vec<i16>| {
            let p = dir.path().join(name);
            std::fs::write(&p, riff(1, 2, 16, &pcm16(&frames), false)).unwrap();
            read_wav(p).unwrap()
        };
        let ab = write("ab.wav", interleave(&a, &b));
        let aa = write("aa.wav", interleave(&a, &a));
        let bb = write("bb.wav", interleave(&b, &b));
        for i in 0..64 {
            assert_eq!(ab.samples()[i], (aa.samples()[i] + bb.samples()[i]) / 2.0);
        }
    }

    #[test]
    fn pcm24_decodes_with_sign() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p24.wav");
        // +0.5 and -0.25 full scale
        let data = [0x00, 0x00, 0x40, 0x00, 0x00, 0xE0];
        std::fs::write(&p, riff(1, 1, 24, &data, false)).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples(), &[0.5, -0.25]);
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f32> = (0..5000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 22_050).unwrap();
        write_wav(&p, &w, WavEncoding::Float32).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate(), 22_050);
        assert!(back
            .samples()
            .iter()
            .zip(w.samples())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pcm16_full_scale_quantizes_to_max_code() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.wav");
        let w = Waveform::new(vec![1.0; 10], 44_100).unwrap();
        let report = write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
        assert_eq!(report.clipped, 0);
        let back = read_wav(&p).unwrap();
        assert!(back.samples().iter().all(|&s| s == 32767.0 / 32768.0));
    }

    #[test]
    fn pcm16_round_trip_within_one_code_and_counts_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples: Vec<f32> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        samples.extend([1.5, -2.0]);
        let w = Waveform::new(samples, 44_100).unwrap();
        let report = write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
        assert_eq!(report.clipped, 2);
        let back = read_wav(&p).unwrap();
        for (a, b) in back.samples()[..2000].iter().zip(&w.samples()[..2000]) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        assert_eq!(back.samples()[2001], -1.0);
    }

    #[test]
    fn empty_waveform_writes_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        let w = Waveform::new(Vec::new(), 44_100).unwrap();
        write_wav(&p, &w, WavEncoding::Float32).unwrap();
        assert!(read_wav(&p).unwrap().is_empty());
        assert_eq!(wav_info(&p).unwrap().frames, 0);
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.wav");
        assert!(matches!(read_wav(&missing), Err(WavError::Missing(_))));

        let p8 = dir.path().join("u8.wav");
        std::fs::write(&p8, riff(1, 1, 8, &[0u8; 4], false)).unwrap();
        assert!(matches!(read_wav(&p8), Err(WavError::Unsupported { .. })));

        let p3 = dir.path().join("three.wav");
        std::fs::write(&p3, riff(1, 3, 16, &[0u8; 12], false)).unwrap();
        assert!(matches!(read_wav(&p3), Err(WavError::Unsupported { .. })));

        let trunc = dir.path().join("t.wav");
        let mut bytes = riff(1, 1, 16, &pcm16(&[1, 2, 3, 4]), false);
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&trunc, bytes).unwrap();
        assert!(matches!(read_wav(&trunc), Err(WavError::Corrupt { .. })));

        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"not a wav file at all").unwrap();
        assert!(matches!(read_wav(&junk), Err(WavError::Corrupt { .. })));
    }
}
