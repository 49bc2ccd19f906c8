use super::Waveform;

const HALF_TAPS: i64 = 64;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel, 64 taps per side.
///
/// The cutoff follows the lower of the two Nyquist rates. Each output sample
/// is normalized by its kernel sum so constant signals are preserved exactly
/// away from the edges. Output length is `round(len * target / source)`.
pub fn resample(wave: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    let source_rate = wave.sample_rate();
    if source_rate == target_rate {
        return wave.clone();
    }
    let src = wave.samples();
    let out_len = ((src.len() as u64 * target_rate as u64 + source_rate as u64 / 2)
        / source_rate as u64) as usize;
    let step = source_rate as f64 / target_rate as f64;
    let cutoff = (target_rate as f64 / source_rate as f64).min(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);
    let radius = HALF_TAPS as f64;

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 * step;
        let centre = t.floor() as i64;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for j in (centre - HALF_TAPS + 1)..=(centre + HALF_TAPS) {
            let x = t - j as f64;
            let r = x / radius;
            if r.abs() > 1.0 {
                continue;
            }
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
            let h = cutoff * sinc(cutoff * x) * window;
            norm += h;
            if j >= 0 && (j as usize) < src.len() {
                acc += h * src[j as usize] as f64;
            }
        }
        out.push(if norm != 0.0 { (acc / norm) as f32 } else { 0.0 });
    }
    Waveform::new(out, target_rate).expect("finite kernel output")
}
