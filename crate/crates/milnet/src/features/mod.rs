//! Log mel-band energy extraction: mono PCM in, `T×40` feature grids out.
//!
//! Audio is analysed in 1024-sample Hamming windows (about 23 ms at
//! 44.1 kHz) hopped by 512 samples (50% overlap), centred by reflection
//! padding; the power spectrum is projected onto a 40-band mel filterbank
//! and floored before the natural log. A 5.00 s clip yields exactly 432
//! frames.
//!
//! The filterbank's upper edge is clamped to the Nyquist frequency
//! (22 050 Hz); bands above Nyquist would integrate empty spectrum.
//!
//! Extracted grids can be cached as little-endian `.lmel` files: the magic
//! bytes `LMEL`, `u32` frame count, `u32` band count, then the row-major
//! `f32` values.

pub mod mel;
pub mod stft;

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use stft::{HOP, WINDOW};

/// Required input rate; anything else must be resampled upstream.
pub const SAMPLE_RATE: u32 = 44_100;
/// Fixed mel band count.
pub const N_BANDS: usize = 40;
/// Power floor applied before the logarithm.
pub const POWER_FLOOR: f64 = 1e-10;

/// Natural log of the power floor: the value every cell takes on silence.
pub fn log_floor() -> f32 {
    (POWER_FLOOR as f32).ln()
}

/// One recording's `T×40` grid of log mel-band energies (natural log).
/// Rows are analysis frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub source_id: String,
    pub frames: usize,
    pub bands: usize,
    pub duration_s: f64,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(source_id: String, frames: usize, duration_s: f64, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * N_BANDS {
            return Err(Error::Feature(format!(
                "{source_id}: {} values cannot fill a {frames}x{N_BANDS} grid",
                values.len()
            )));
        }
        Ok(FeatureMatrix {
            source_id,
            frames,
            bands: N_BANDS,
            duration_s,
            values,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }
}

/// Extract the log mel-band energy grid from mono PCM at 44.1 kHz.
pub fn extract_logmel(samples: &[f32], sample_rate: u32, source_id: &str) -> Result<FeatureMatrix> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::Feature(format!(
            "{source_id}: expected {SAMPLE_RATE} Hz input, got {sample_rate} Hz (resample first)"
        )));
    }
    if samples.len() < WINDOW {
        return Err(Error::Feature(format!(
            "{source_id}: {} samples is shorter than one {WINDOW}-sample analysis window",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Feature(format!("{source_id}: non-finite sample")));
    }
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let spec = stft::power_spectrogram(&x);
    let frames = stft::n_frames(x.len());
    let bank = mel::filterbank(
        N_BANDS,
        WINDOW,
        SAMPLE_RATE as f64,
        0.0,
        SAMPLE_RATE as f64 / 2.0,
    );
    let mut values = vec![0.0f32; frames * N_BANDS];
    for t in 0..frames {
        let row = &spec[t * stft::N_BINS..(t + 1) * stft::N_BINS];
        for (b, filter) in bank.iter().enumerate() {
            let mut e = 0.0f64;
            for (w, p) in filter.iter().zip(row) {
                e += w * p;
            }
            values[t * N_BANDS + b] = e.max(POWER_FLOOR).ln() as f32;
        }
    }
    FeatureMatrix::new(
        source_id.to_string(),
        frames,
        samples.len() as f64 / SAMPLE_RATE as f64,
        values,
    )
}

/// Bring a grid to exactly `target_frames` rows: shorter grids are
/// right-padded with the log floor, longer ones cropped at the end. Returns
/// the padded grid together with the number of rows that carry real signal,
/// so downstream losses can mask the padding.
pub fn pad_or_crop(features: &FeatureMatrix, target_frames: usize) -> (FeatureMatrix, usize) {
    let valid = features.frames.min(target_frames);
    let mut values = vec![log_floor(); target_frames * N_BANDS];
    values[..valid * N_BANDS].copy_from_slice(&features.values[..valid * N_BANDS]);
    let padded = FeatureMatrix {
        source_id: features.source_id.clone(),
        frames: target_frames,
        bands: N_BANDS,
        duration_s: features.duration_s,
        values,
    };
    (padded, valid)
}

/// Write a grid as a `.lmel` cache file.
pub fn write_lmel(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + fm.values.len() * 4);
    buf.extend_from_slice(b"LMEL");
    buf.extend_from_slice(&(fm.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.bands as u32).to_le_bytes());
    for v in &fm.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

/// Read a `.lmel` cache file; the recording id is the file stem.
pub fn read_lmel(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 12 || &bytes[..4] != b"LMEL" {
        return Err(Error::Feature(format!(
            "{}: not a feature cache file",
            path.display()
        )));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bands != N_BANDS {
        return Err(Error::Feature(format!(
            "{}: {bands} bands, expected {N_BANDS}",
            path.display()
        )));
    }
    let expect = 12 + frames * bands * 4;
    if bytes.len() != expect {
        return Err(Error::Feature(format!(
            "{}: truncated cache ({} bytes, expected {expect})",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let duration_s = frames as f64 * HOP as f64 / SAMPLE_RATE as f64;
    FeatureMatrix::new(source_id, frames, duration_s, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, seconds: f64) -> Vec<f32> {
        let n = (seconds * SAMPLE_RATE as f64).round() as usize;
        (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn five_second_clip_yields_432_by_40() {
        let x = sine(440.0, 0.1, 5.0);
        assert_eq!(x.len(), 220_500);
        let fm = extract_logmel(&x, SAMPLE_RATE, "sine").unwrap();
        assert_eq!((fm.frames, fm.bands), (432, 40));
        assert!(fm.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn digital_silence_is_the_constant_log_floor() {
        let x = vec![0.0f32; 44_100];
        let fm = extract_logmel(&x, SAMPLE_RATE, "silence").unwrap();
        let floor = log_floor();
        assert!(fm.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_khz_sine_peaks_in_the_predicted_band() {
        let x = sine(1000.0, 0.5, 1.0);
        let fm = extract_logmel(&x, SAMPLE_RATE, "1k").unwrap();
        let expected_band =
            mel::band_with_peak_response(N_BANDS, 0.0, SAMPLE_RATE as f64 / 2.0, 1000.0);
        // Every interior frame's argmax lands on the same band.
        for t in 2..fm.frames - 2 {
            let row = fm.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected_band, "frame {t}");
        }
    }

    #[test]
    fn scaling_the_waveform_shifts_log_energy_by_two_log_c() {
        let x = sine(500.0, 0.2, 1.0);
        let c = 3.0f32;
        let scaled: Vec<f32> = x.iter().map(|&v| v * c).collect();
        let a = extract_logmel(&x, SAMPLE_RATE, "a").unwrap();
        let b = extract_logmel(&scaled, SAMPLE_RATE, "b").unwrap();
        let shift = 2.0 * (c as f64).ln();
        for (va, vb) in a.values().iter().zip(b.values()) {
            // Skip cells at the floor, where the clamp breaks homogeneity.
            if *va > log_floor() + 1.0 {
                assert!(
                    ((*vb - *va) as f64 - shift).abs() < 1e-4,
                    "shift {} vs {shift}",
                    vb - va
                );
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let x = sine(777.0, 0.3, 0.7);
        let a = extract_logmel(&x, SAMPLE_RATE, "x").unwrap();
        let b = extract_logmel(&x, SAMPLE_RATE, "x").unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(extract_logmel(&[0.0; 100], SAMPLE_RATE, "short").is_err());
        assert!(extract_logmel(&sine(440.0, 0.1, 0.5), 48_000, "rate").is_err());
        let mut bad = sine(440.0, 0.1, 0.5);
        bad[7] = f32::NAN;
        assert!(extract_logmel(&bad, SAMPLE_RATE, "nan").is_err());
    }

    #[test]
    fn pad_or_crop_contract() {
        let x = sine(440.0, 0.1, 1.0);
        let fm = extract_logmel(&x, SAMPLE_RATE, "p").unwrap();
        let t = fm.frames;

        let (same, valid) = pad_or_crop(&fm, t);
        assert_eq!(same.values(), fm.values());
        assert_eq!(valid, t);

        let (padded, valid) = pad_or_crop(&fm, t + 10);
        assert_eq!(valid, t);
        assert_eq!(padded.frames, t + 10);
        assert!(padded.values()[t * N_BANDS..].iter().all(|&v| v == log_floor()));

        let (cropped, valid) = pad_or_crop(&fm, t - 5);
        assert_eq!(valid, t - 5);
        assert_eq!(cropped.values(), &fm.values()[..(t - 5) * N_BANDS]);
    }

    #[test]
    fn lmel_roundtrip_is_exact() {
        let x = sine(440.0, 0.1, 0.6);
        let fm = extract_logmel(&x, SAMPLE_RATE, "cache").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.lmel");
        write_lmel(&path, &fm).unwrap();
        let back = read_lmel(&path).unwrap();
        assert_eq!(back.values(), fm.values());
        assert_eq!(back.frames, fm.frames);
        assert_eq!(back.source_id, "cache");
    }
}
