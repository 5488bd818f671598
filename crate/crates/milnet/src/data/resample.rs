//! Windowed-sinc resampling to the canonical 44.1 kHz rate.

/// Half-width of the sinc kernel in input samples.
const TAPS: isize = 32;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample `input` from `from_rate` to `to_rate` with a Hann-windowed sinc
/// kernel; the cutoff tracks the lower of the two Nyquist frequencies.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let cutoff = ratio.min(1.0);
    let out_len = (input.len() as f64 * ratio).round() as usize;
    let n = input.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let centre = i as f64 / ratio;
        let lo = (centre.floor() as isize - TAPS).max(0);
        let hi = (centre.floor() as isize + TAPS + 1).min(n);
        let mut acc = 0.0f64;
        for j in lo..hi {
            let u = centre - j as f64;
            let window = 0.5 * (1.0 + (std::f64::consts::PI * u / TAPS as f64).cos());
            acc += input[j as usize] as f64 * cutoff * sinc(cutoff * u) * window;
        }
        out.push(acc as f32);
    }
    out
}
