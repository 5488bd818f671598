//! RIFF/WAVE ingestion and emission: 16-bit PCM or 32-bit float, any channel
//! count downmixed to mono by averaging.

use std::path::Path;

use crate::error::{Error, Result};

/// Read a WAV file as mono `f32` samples in `[-1, 1]` plus its sample rate.
pub fn read_mono(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Data(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32_768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported format {fmt:?}/{bits}-bit (need 16-bit PCM or 32-bit float)",
                path.display()
            )));
        }
    };
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok((mono, spec.sample_rate))
}

/// Write mono samples as 16-bit PCM, clamping into `[-1, 1]`.
pub fn write_mono_16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32_768.0).round().clamp(-32_768.0, 32_767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
