//! Short-time Fourier transform with Hamming windowing and
//! reflection-centred framing.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const WINDOW: usize = 1024;
pub const HOP: usize = 512;
pub const N_BINS: usize = WINDOW / 2 + 1;

/// Frame count for a signal of `n` samples: frames start every `HOP`
/// samples on the centre-padded signal and one extra frame covers the tail,
/// so a 5 s clip at 44.1 kHz yields exactly 432 frames.
pub fn n_frames(n_samples: usize) -> usize {
    n_samples.div_ceil(HOP) + 1
}

fn hamming() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
        .collect()
}

/// Sample of the centre-padded signal at virtual index `j` (may fall in the
/// reflected margins).
fn padded_sample(x: &[f64], j: isize) -> f64 {
    let n = x.len() as isize;
    let idx = if j < 0 {
        -j
    } else if j >= n {
        2 * (n - 1) - j
    } else {
        j
    };
    x[idx.clamp(0, n - 1) as usize]
}

/// Power spectrogram `[n_frames(x) × N_BINS]`, row-major.
pub fn power_spectrogram(x: &[f64]) -> Vec<f64> {
    let frames = n_frames(x.len());
    let window = hamming();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(WINDOW);
    let mut out = vec![0.0f64; frames * N_BINS];
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let offset = (WINDOW / 2) as isize;
    for t in 0..frames {
        let start = (t * HOP) as isize - offset;
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex::new(padded_sample(x, start + i as isize) * w, 0.0);
        }
        fft.process(&mut buf);
        let row = &mut out[t * N_BINS..(t + 1) * N_BINS];
        for (k, v) in buf.iter().take(N_BINS).enumerate() {
            row[k] = v.norm_sqr();
        }
    }
    out
}
