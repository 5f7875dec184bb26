//! Single-file checkpoints: the magic `EXUNETCK`, a little-endian `u64`
//! manifest length, the UTF-8 JSON manifest, then every array as
//! little-endian `f32` in manifest order (parameters, then the Adam first
//! and second moments of each learnable parameter).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamKind, ParamStore};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"EXUNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub running: bool,
}

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Format(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Completed epochs and optimizer steps.
    pub epoch: usize,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Speaker id of each classifier output.
    pub classes: Vec<u32>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam<f32>>,
}

fn put(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn take(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f32>> {
    let end = *at + 4 * n;
    if end > bytes.len() {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let out = bytes[*at..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    *at = end;
    Ok(out)
}

impl Checkpoint {
    /// Snapshot of a model without training state.
    pub fn from_model<S: Scalar>(model: &Model<S>, classes: Vec<u32>) -> Self {
        let params = model.params.cast::<f32>();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                model: model.cfg.clone(),
                train: None,
                epoch: 0,
                step: 0,
                rng: None,
                classes,
                params: params.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone(), running: !p.learnable() }).collect(),
                optimizer: None,
            },
            params,
            adam: None,
        }
    }

    pub fn with_adam(mut self, adam: &Adam<f32>) -> Self {
        self.manifest.optimizer = Some(OptimizerMeta { step: adam.step, beta1: adam.beta1, beta2: adam.beta2, eps: adam.eps });
        self.adam = Some(adam.clone());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.iter().map(|p| p.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params.iter() {
            put(&mut out, &p.value)?;
        }
        if let Some(adam) = &self.adam {
            for moments in [&adam.m, &adam.v] {
                for (p, m) in self.params.iter().zip(moments) {
                    if p.learnable() {
                        put(&mut out, m)?;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| Error::Format("checkpoint manifest is truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.format_version)));
        }
        let mut at = 16 + len;
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let n = e.shape.iter().product();
            let kind = if e.running { ParamKind::RunningStat } else { ParamKind::Learnable };
            params.add(e.name.clone(), e.shape.clone(), take(bytes, &mut at, n)?, kind);
        }
        let adam = match &manifest.optimizer {
            None => None,
            Some(meta) => {
                let mut read = || -> Result<Vec<Vec<f32>>> {
                    params.iter().map(|p| if p.learnable() { take(bytes, &mut at, p.len()) } else { Ok(Vec::new()) }).collect()
                };
                let m = read()?;
                let v = read()?;
                Some(Adam { beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps, step: meta.step, m, v })
            }
        };
        if at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint arrays", bytes.len() - at)));
        }
        Ok(Self { manifest, params, adam })
    }

    /// Writes through a temporary file so an interrupted save never leaves a partial checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(&self.to_bytes()?)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn model<S: Scalar>(&self) -> Result<Model<S>> {
        Model::from_params(self.manifest.model.clone(), &self.params.cast())
    }

    pub fn rng(&self) -> Result<Option<ChaCha8Rng>> {
        self.manifest.rng.as_ref().map(RngState::restore).transpose()
    }
}
