use std::path::Path;

use super::{SourceKind, Waveform};
use crate::error::{Error, Result};

const FULL_SCALE: f64 = i16::MAX as f64;

/// Reads a 16-bit PCM mono RIFF file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Format(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "expected 16-bit PCM, found {:?} with {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| (v as f64 / FULL_SCALE).max(-1.0)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    if samples.is_empty() {
        return Err(Error::Format("wav file contains no samples".into()));
    }
    Ok(Waveform::new(samples, spec.sample_rate, SourceKind::Clean))
}

/// Writes a 16-bit PCM mono RIFF file; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    wave.validate()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &x in &wave.samples {
        let q = (x.clamp(-1.0, 1.0) * FULL_SCALE).round() as i16;
        writer.write_sample(q).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)?;
    Ok(())
}
