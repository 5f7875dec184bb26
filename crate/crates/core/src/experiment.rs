//! Small-scale comparison of training modes on synthetic speakers.
//!
//! Every system is trained once per seed on the same training corpus and
//! scored on a second corpus of unseen speakers under the full noise grid.

use serde::{Deserialize, Serialize};

use crate::corpus::{synth_noise_pool, synth_speaker_corpus, Corpus, NoiseKind};
use crate::error::{Error, Result};
use crate::metrics::{condition_grid, generate_trials, EvalOptions, EvalReport, Evaluator, Trial};
use crate::model::Mode;
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskSystem {
    pub name: String,
    pub mode: Mode,
    pub augment: bool,
}

impl DeskSystem {
    pub fn new(name: &str, mode: Mode, augment: bool) -> Self {
        Self { name: name.to_string(), mode, augment }
    }

    /// Clean-only baseline, augmented baseline, U-Net and ExU-Net.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("baseline-clean", Mode::Baseline, false),
            Self::new("baseline", Mode::Baseline, true),
            Self::new("unet", Mode::Unet, true),
            Self::new("exunet", Mode::Exunet, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub train_speakers: usize,
    pub train_utts: usize,
    pub test_speakers: usize,
    pub test_utts: usize,
    pub duration_s: f64,
    pub noise_clips: usize,
    pub noise_duration_s: f64,
    pub corpus_seed: u64,
    pub nontargets_per_target: usize,
    pub seeds: Vec<u64>,
    pub systems: Vec<DeskSystem>,
    /// Mode, seed and augmentation are overridden per run.
    pub train: TrainConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            train_speakers: 20,
            train_utts: 8,
            test_speakers: 20,
            test_utts: 5,
            duration_s: 1.5,
            noise_clips: 12,
            noise_duration_s: 3.0,
            corpus_seed: 1,
            nontargets_per_target: 3,
            seeds: vec![0, 1, 2],
            systems: DeskSystem::standard(),
            train: TrainConfig {
                epochs: 45,
                steps_per_epoch: Some(24),
                lr0: 0.003,
                crop_frames: 48,
                widths: [8, 16, 16, 16, 16],
                blocks: [1; 4],
                se_reduction: 4,
                asp_hidden: 32,
                emb_dim: 64,
                n_mels: 32,
                checkpoint_every: 0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskRun {
    pub system: String,
    pub seed: u64,
    pub final_loss: f64,
    pub report: EvalReport,
}

impl DeskRun {
    pub fn noisy_eer(&self) -> f64 {
        self.report.noisy_average.map_or(f64::NAN, |m| m.eer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskResult {
    pub runs: Vec<DeskRun>,
}

impl DeskResult {
    /// Seed-averaged noisy-condition EER of a system.
    pub fn mean_noisy_eer(&self, system: &str) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.system == system).map(DeskRun::noisy_eer).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_clean_eer(&self, system: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.system == system)
            .filter_map(|r| r.report.conditions.iter().find(|c| !c.condition.is_noisy()).map(|c| c.eer))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Training corpus, evaluation corpus and the evaluation trials.
pub fn desk_corpora(cfg: &DeskConfig) -> Result<(Corpus, Corpus, Vec<Trial>)> {
    let pool = synth_noise_pool(cfg.noise_clips, cfg.noise_duration_s, cfg.corpus_seed, &NoiseKind::ALL)?;
    let mut train = synth_speaker_corpus(cfg.train_speakers, cfg.train_utts, cfg.duration_s, cfg.corpus_seed)?;
    train.attach_noise(pool.clone(), 0.5, cfg.corpus_seed)?;
    let test_seed = cfg.corpus_seed.wrapping_add(0x7E57);
    let mut test = synth_speaker_corpus(cfg.test_speakers, cfg.test_utts, cfg.duration_s, test_seed)?;
    test.attach_noise(pool, 0.5, cfg.corpus_seed)?;
    let trials = generate_trials(&test, cfg.nontargets_per_target, test_seed)?;
    Ok((train, test, trials))
}

/// Runs every system for every seed; `progress` sees each finished run.
pub fn run_desk(cfg: &DeskConfig, mut progress: impl FnMut(&DeskRun)) -> Result<DeskResult> {
    if cfg.seeds.is_empty() || cfg.systems.is_empty() {
        return Err(Error::Argument("desk comparison needs at least one seed and one system".into()));
    }
    let (train, test, trials) = desk_corpora(cfg)?;
    let conditions = condition_grid(&NoiseKind::ALL);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for sys in &cfg.systems {
            let tc = TrainConfig { mode: sys.mode, seed, augment: sys.augment, ..cfg.train.clone() };
            let mut trainer = Trainer::new(&train, tc)?;
            let mut final_loss = f64::NAN;
            for _ in 0..cfg.train.epochs {
                final_loss = trainer.run_epoch()?.total;
            }
            let model = trainer.model.clone();
            let mut ev = Evaluator::new(&model, &test, EvalOptions { corrupt_enroll: false, seed })?;
            let (report, _) = ev.evaluate(&sys.name, &trials, &conditions)?;
            let run = DeskRun { system: sys.name.clone(), seed, final_loss, report };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(DeskResult { runs })
}
