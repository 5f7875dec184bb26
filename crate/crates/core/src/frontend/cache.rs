//! Feature cache files: one JSON header line, then the values as
//! little-endian `f32` in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MelSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    shape: [usize; 2],
    dtype: String,
    frame_hop_s: f64,
    frame_len_s: f64,
    n_fft: usize,
    sample_rate: u32,
}

pub fn write_feature_cache<S: Scalar>(path: &Path, spec: &MelSpec<S>) -> Result<()> {
    let header = CacheHeader {
        shape: [spec.n_mels, spec.n_frames],
        dtype: "f32le".into(),
        frame_hop_s: spec.frame_hop_s,
        frame_len_s: spec.frame_len_s,
        n_fft: spec.n_fft,
        sample_rate: spec.sample_rate,
    };
    let mut out = Vec::with_capacity(64 + 4 * spec.values.len());
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for v in &spec.values {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_feature_cache<S: Scalar>(path: &Path) -> Result<MelSpec<S>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CacheHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported cache dtype `{}`", header.dtype)));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let n = header.shape[0] * header.shape[1];
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!("cache holds {} bytes, header promises {}", bytes.len(), 4 * n)));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| S::c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Ok(MelSpec {
        values,
        n_mels: header.shape[0],
        n_frames: header.shape[1],
        frame_hop_s: header.frame_hop_s,
        frame_len_s: header.frame_len_s,
        n_fft: header.n_fft,
        sample_rate: header.sample_rate,
    })
}
