//! Joint optimization of the classification, reconstruction and embedding
//! terms over paired clean/noisy mini-batches.

pub mod batch;
mod config;
pub mod gradcheck;
mod objective;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::corpus::{stream_rng, Corpus, Waveform};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::losses::LossBundle;
use crate::model::Model;
use crate::nn::Ctx;
use crate::optim::Adam;

pub use batch::{materialize, plan_minibatch, sample_minibatch, BatchSpec, MiniBatch, PairPlan, SpeakerIndex};
pub use config::{lr_schedule, parse_mode, TrainConfig};
pub use gradcheck::{grad_check, grad_check_modes, GradCheckConfig, GradTerm, ParamCheck, TermCheck};
pub use objective::objective;

const BATCH_STREAM: u64 = 0xBA7C;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CURVE_FILE: &str = "loss_curve.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub cce: f64,
    pub mse: f64,
    pub apn: f64,
    pub total: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord<'a> {
    Step { epoch: usize, step: u64, lr: f64, #[serde(flatten)] loss: &'a LossBundle },
    Epoch(&'a EpochSummary),
    Checkpoint { epoch: usize, path: &'a str },
    Diverged { epoch: usize, step: u64, reason: &'a str },
}

/// Training state over a borrowed corpus.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    corpus: &'a Corpus,
    index: SpeakerIndex,
    noise: Vec<&'a Waveform>,
    frontend: Frontend<f32>,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let index = SpeakerIndex::new(corpus);
        let model = Model::new(cfg.model_config(index.len()), cfg.seed)?;
        let adam = Adam::new(&model.params);
        let rng = stream_rng(cfg.seed, BATCH_STREAM);
        Self::assemble(corpus, cfg, index, model, adam, rng, 0, 0)
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(corpus: &'a Corpus, ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let cfg = m.train.clone().ok_or_else(|| Error::Format("checkpoint holds no training configuration".into()))?;
        let adam = ck.adam.clone().ok_or_else(|| Error::Format("checkpoint holds no optimizer state".into()))?;
        let rng = ck.rng()?.ok_or_else(|| Error::Format("checkpoint holds no sampler state".into()))?;
        let index = SpeakerIndex::new(corpus);
        let ids: Vec<u32> = index.speakers.iter().map(|(id, _)| *id).collect();
        if ids != m.classes {
            return Err(Error::Config("corpus speakers differ from the checkpoint's classes".into()));
        }
        let model = ck.model()?;
        if adam.m.len() != model.params.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        Self::assemble(corpus, cfg, index, model, adam, rng, m.epoch, m.step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        corpus: &'a Corpus,
        cfg: TrainConfig,
        index: SpeakerIndex,
        model: Model<f32>,
        adam: Adam<f32>,
        rng: ChaCha8Rng,
        epoch: usize,
        step: u64,
    ) -> Result<Self> {
        let noise = corpus.noise_train();
        if cfg.augment && noise.is_empty() {
            return Err(Error::Config("noise augmentation needs a training noise pool".into()));
        }
        let frontend = Frontend::new(cfg.frontend_config(corpus.manifest.sample_rate))?;
        Ok(Self { cfg, corpus, index, noise, frontend, model, adam, rng, epoch, step })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_for(self.index.total_utterances())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            speakers: self.cfg.speakers_per_batch,
            crop_frames: self.cfg.crop_frames,
            snr_range: self.cfg.snr_range,
            augment: self.cfg.augment,
        }
    }

    pub fn next_batch(&mut self) -> Result<MiniBatch<f32>> {
        let spec = self.batch_spec();
        sample_minibatch(self.corpus, &self.index, &self.noise, &spec, &self.frontend, &mut self.rng)
    }

    /// One Adam update on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<LossBundle> {
        let lr = lr_schedule(self.epoch, &self.cfg);
        let batch = self.next_batch()?;
        let mut ctx = Ctx::train();
        let (loss, grads) = objective(&self.model, &mut ctx, &batch.inputs, &batch.targets, &batch.labels, &self.cfg.loss)?;
        let diverged = |reason: String| Error::Diverged { epoch: self.epoch, step: self.step as usize, reason };
        if !loss.is_finite() {
            return Err(diverged(format!(
                "non-finite loss (cce {}, mse {}, apn {}, total {})",
                loss.cce, loss.mse, loss.apn, loss.total
            )));
        }
        if !grads.all_finite() {
            return Err(diverged("non-finite gradient".into()));
        }
        self.adam.update(&mut self.model.params, &grads, lr)?;
        for u in &ctx.bn_updates {
            u.apply(&mut self.model.params);
        }
        self.model.clamp_apn();
        if !self.model.params.all_finite() {
            return Err(diverged("non-finite parameters after update".into()));
        }
        self.step += 1;
        Ok(loss)
    }

    fn run_epoch_logged(&mut self, mut log: Option<&mut dyn Write>) -> Result<EpochSummary> {
        let lr = lr_schedule(self.epoch, &self.cfg);
        let steps = self.steps_per_epoch();
        let mut sum = EpochSummary { epoch: self.epoch + 1, steps, lr, cce: 0.0, mse: 0.0, apn: 0.0, total: 0.0 };
        for _ in 0..steps {
            let loss = match self.train_step() {
                Ok(l) => l,
                Err(e) => {
                    if let (Some(w), Error::Diverged { reason, .. }) = (log.as_deref_mut(), &e) {
                        write_record(w, &LogRecord::Diverged { epoch: self.epoch + 1, step: self.step + 1, reason })?;
                    }
                    return Err(e);
                }
            };
            if let Some(w) = log.as_deref_mut() {
                write_record(w, &LogRecord::Step { epoch: self.epoch + 1, step: self.step, lr, loss: &loss })?;
            }
            sum.cce += loss.cce;
            sum.mse += loss.mse;
            sum.apn += loss.apn;
            sum.total += loss.total;
        }
        let k = steps as f64;
        sum.cce /= k;
        sum.mse /= k;
        sum.apn /= k;
        sum.total /= k;
        self.epoch += 1;
        if let Some(w) = log {
            write_record(w, &LogRecord::Epoch(&sum))?;
        }
        Ok(sum)
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        self.run_epoch_logged(None)
    }

    /// Complete state: weights, running statistics, Adam moments, sampler position.
    pub fn checkpoint(&self) -> Checkpoint {
        let classes = self.index.speakers.iter().map(|(id, _)| *id).collect();
        let mut ck = Checkpoint::from_model(&self.model, classes).with_adam(&self.adam);
        ck.manifest.train = Some(self.cfg.clone());
        ck.manifest.epoch = self.epoch;
        ck.manifest.step = self.step;
        ck.manifest.rng = Some(RngState::capture(&self.rng));
        ck
    }
}

fn write_record(w: &mut dyn Write, rec: &LogRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Paths written by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub curve: PathBuf,
    pub epochs: Vec<EpochSummary>,
    pub n_params: usize,
}

/// Trains from scratch for `cfg.epochs` epochs, writing logs and checkpoints under `run_dir`.
pub fn train(corpus: &Corpus, cfg: TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, cfg)?;
    fs::create_dir_all(run_dir)?;
    File::create(run_dir.join(LOG_FILE))?;
    File::create(run_dir.join(CURVE_FILE))?;
    fs::write(run_dir.join("train.conf"), trainer.cfg.to_kv_string())?;
    continue_training(&mut trainer, run_dir)
}

/// Resumes from `checkpoint` and trains up to the configured epoch count, appending to the logs.
pub fn resume_training(corpus: &Corpus, checkpoint: &Path, run_dir: &Path) -> Result<TrainOutcome> {
    let ck = Checkpoint::read(checkpoint)?;
    let mut trainer = Trainer::resume(corpus, &ck)?;
    continue_training(&mut trainer, run_dir)
}

/// Runs the remaining epochs of `trainer` with logging and periodic checkpoints.
pub fn continue_training(trainer: &mut Trainer, run_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(run_dir)?;
    let log_path = run_dir.join(LOG_FILE);
    let curve_path = run_dir.join(CURVE_FILE);
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    let fresh_curve = fs::metadata(&curve_path).map(|m| m.len() == 0).unwrap_or(true);
    let mut curve = BufWriter::new(OpenOptions::new().create(true).append(true).open(&curve_path)?);
    if fresh_curve {
        writeln!(curve, "epoch,lr,cce,mse,apn,total")?;
    }
    let mut epochs = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let s = trainer.run_epoch_logged(Some(&mut log))?;
        writeln!(curve, "{},{},{},{},{},{}", s.epoch, s.lr, s.cce, s.mse, s.apn, s.total)?;
        curve.flush()?;
        epochs.push(s);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.cfg.epochs {
            let path = run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{:04}.ckpt", trainer.epoch));
            trainer.checkpoint().write(&path)?;
            write_record(&mut log, &LogRecord::Checkpoint { epoch: trainer.epoch, path: &path.to_string_lossy() })?;
        }
    }
    let path = run_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().write(&path)?;
    write_record(&mut log, &LogRecord::Checkpoint { epoch: trainer.epoch, path: &path.to_string_lossy() })?;
    Ok(TrainOutcome { checkpoint: path, log: log_path, curve: curve_path, epochs, n_params: trainer.model.count_params() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_noise_pool, synth_speaker_corpus, NoiseKind};
    use crate::model::Mode;

    fn corpus() -> Corpus {
        let mut c = synth_speaker_corpus(6, 3, 0.6, 11).unwrap();
        c.attach_noise(synth_noise_pool(4, 1.0, 12, &NoiseKind::ALL).unwrap(), 0.5, 13).unwrap();
        c
    }

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            speakers_per_batch: 3,
            steps_per_epoch: Some(2),
            crop_frames: 20,
            widths: [4; 5],
            blocks: [1; 4],
            se_reduction: 2,
            asp_hidden: 8,
            emb_dim: 8,
            n_mels: 16,
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_logs_finite_components() {
        let c = corpus();
        for mode in Mode::ALL {
            let mut t = Trainer::new(&c, tiny(mode)).unwrap();
            let s = t.run_epoch().unwrap();
            assert_eq!(s.steps, 2);
            assert!(s.total.is_finite() && s.cce > 0.0);
            assert_eq!(s.mse > 0.0, mode.has_decoder());
            assert_eq!(s.apn > 0.0, mode == Mode::Exunet);
            assert_eq!(t.step, 2);
        }
    }

    #[test]
    fn run_directory_contents() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&c, tiny(Mode::Exunet), dir.path()).unwrap();
        assert_eq!(out.epochs.len(), 2);
        let log = fs::read_to_string(&out.log).unwrap();
        let kinds: Vec<String> = log
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(kinds, ["step", "step", "epoch", "checkpoint", "step", "step", "epoch", "checkpoint"]);
        assert_eq!(fs::read_to_string(&out.curve).unwrap().lines().count(), 3);
        assert!(dir.path().join(CHECKPOINT_DIR).join("epoch_0001.ckpt").exists());
        let ck = Checkpoint::read(&out.checkpoint).unwrap();
        assert_eq!(ck.manifest.epoch, 2);
        assert_eq!(ck.manifest.step, 4);
        assert_eq!(ck.manifest.classes, (0..6).collect::<Vec<u32>>());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = corpus();
        let cfg = TrainConfig { epochs: 3, ..tiny(Mode::Exunet) };
        let mut straight = Trainer::new(&c, cfg.clone()).unwrap();
        let mut first = Trainer::new(&c, cfg).unwrap();
        straight.run_epoch().unwrap();
        first.run_epoch().unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        drop(first);
        let mut resumed = Trainer::resume(&c, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        for _ in 0..2 {
            assert_eq!(straight.run_epoch().unwrap(), resumed.run_epoch().unwrap());
        }
        assert_eq!(straight.model.params, resumed.model.params);
        assert_eq!(straight.adam, resumed.adam);
    }

    #[test]
    fn divergence_is_reported() {
        let c = corpus();
        let mut t = Trainer::new(&c, tiny(Mode::Baseline)).unwrap();
        let id = t.model.params.id("head.fc.weight").unwrap();
        t.model.params.get_mut(id)[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let mut log = Vec::new();
        let e = t.run_epoch_logged(Some(&mut log)).unwrap_err();
        assert!(matches!(e, Error::Diverged { epoch: 0, step: 0, .. }), "{e}");
        assert!(String::from_utf8(log).unwrap().contains("\"kind\":\"diverged\""));
        drop(dir);
    }

    #[test]
    fn clean_only_training_needs_no_noise() {
        let c = synth_speaker_corpus(6, 3, 0.6, 11).unwrap();
        assert!(Trainer::new(&c, tiny(Mode::Baseline)).is_err());
        let mut t = Trainer::new(&c, TrainConfig { augment: false, ..tiny(Mode::Baseline) }).unwrap();
        assert!(t.run_epoch().unwrap().total.is_finite());
    }
}
