//! Mel scale and triangular filterbank construction.
//!
//! Uses the classic auditory-toolbox mel scale (linear below 1 kHz,
//! logarithmic above) with area-normalised triangles.

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    (6.4f64).ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// Triangle edge frequencies for `n_bands` filters between `f_min` and
/// `f_max`: `n_bands + 2` values, equally spaced on the mel scale.
pub fn band_edges(n_bands: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    (0..n_bands + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_bands + 1) as f64))
        .collect()
}

/// Dense `[n_bands, n_fft/2 + 1]` filterbank with area normalisation
/// (each triangle scaled by `2 / (upper_edge − lower_edge)`).
pub fn filterbank(n_bands: usize, n_fft: usize, sample_rate: f64, f_min: f64, f_max: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let edges = band_edges(n_bands, f_min, f_max);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate / n_fft as f64)
        .collect();
    let mut bank = vec![vec![0.0f64; n_bins]; n_bands];
    for b in 0..n_bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            bank[b][k] = w * norm;
        }
    }
    bank
}

/// Index of the band whose triangle responds most strongly at `hz`, derived
/// from the closed-form edges alone.
pub fn band_with_peak_response(n_bands: usize, f_min: f64, f_max: f64, hz: f64) -> usize {
    let edges = band_edges(n_bands, f_min, f_max);
    let mut best = 0usize;
    let mut best_w = f64::MIN;
    for b in 0..n_bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let w = ((hz - lo) / (mid - lo)).min((hi - hz) / (hi - mid)).max(0.0) * 2.0 / (hi - lo);
        if w > best_w {
            best_w = w;
            best = b;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_roundtrips() {
        for hz in [0.0, 110.0, 440.0, 999.0, 1000.0, 4321.0, 22050.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6, "hz={hz}");
        }
    }

    #[test]
    fn mel_scale_is_linear_below_the_break() {
        assert!((hz_to_mel(110.0) - 1.65).abs() < 1e-12);
        assert!((hz_to_mel(220.0) - 3.3).abs() < 1e-12);
    }

    #[test]
    fn filterbank_rows_are_nonnegative_with_contiguous_support() {
        let bank = filterbank(40, 1024, 44_100.0, 0.0, 22_050.0);
        for (b, row) in bank.iter().enumerate() {
            assert!(row.iter().all(|&w| w >= 0.0), "band {b} has negative weight");
            let first = row.iter().position(|&w| w > 0.0);
            let last = row.iter().rposition(|&w| w > 0.0);
            if let (Some(first), Some(last)) = (first, last) {
                assert!(
                    row[first..=last].iter().all(|&w| w > 0.0),
                    "band {b} support has a hole"
                );
            }
        }
    }

    #[test]
    fn all_ones_spectrum_gives_strictly_positive_band_energies() {
        let bank = filterbank(40, 1024, 44_100.0, 0.0, 22_050.0);
        for (b, row) in bank.iter().enumerate() {
            let e: f64 = row.iter().sum();
            assert!(e > 0.0, "band {b} vanishes on a flat spectrum");
        }
    }
}
