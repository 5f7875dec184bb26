use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::losses::{LossConfig, MseNorm};
use crate::model::{Mode, ModelConfig, DEFAULT_BLOCKS, DEFAULT_WIDTHS, LITE_WIDTH_SCALE};

/// Training run settings, read from a flat `key = value` file.
///
/// | key | default | meaning |
/// |---|---|---|
/// | `mode` | `exunet` | `baseline`, `unet`, `exunet` or `exunet-l` (sets `width_scale`) |
/// | `seed` | `0` | model initialization and batch sampling |
/// | `epochs` | `30` | |
/// | `speakers_per_batch` | `10` | `n`; each batch holds `2n` spectrograms |
/// | `steps_per_epoch` | `auto` | `auto` is ceil(utterances / 2n) |
/// | `lr0` | `0.001` | |
/// | `lr_decay` | `0.95` | multiplicative factor applied every `lr_decay_every` epochs |
/// | `lr_decay_every` | `10` | |
/// | `snr_min`, `snr_max` | `0`, `20` | dB, within [-10, 40] |
/// | `crop_frames` | `200` | |
/// | `augment` | `true` | `false` trains on clean utterances only |
/// | `checkpoint_every` | `10` | epochs; `0` writes only the final checkpoint |
/// | `widths` | `32,64,64,64,64` | stem then stage widths, before `width_scale` |
/// | `blocks` | `3,4,6,3` | residual blocks per stage |
/// | `width_scale` | `1.0` | |
/// | `se_reduction`, `asp_hidden`, `emb_dim`, `n_mels` | `8`, `128`, `256`, `64` | |
/// | `loss.sid`, `loss.fe` | `true` | enable classification / reconstruction terms |
/// | `loss.ee` | `apn` | `apn`, `mse` or `none` |
/// | `loss.mse_norm` | `perelement` | `perelement` or `literal` |
/// | `loss.w_cce`, `loss.w_mse`, `loss.w_ee` | `1` | term weights |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub speakers_per_batch: usize,
    pub steps_per_epoch: Option<usize>,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub snr_range: [f64; 2],
    pub crop_frames: usize,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub widths: [usize; 5],
    pub blocks: [usize; 4],
    pub width_scale: f64,
    pub se_reduction: usize,
    pub asp_hidden: usize,
    pub emb_dim: usize,
    pub n_mels: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            mode: Mode::Exunet,
            seed: 0,
            epochs: 30,
            speakers_per_batch: 10,
            steps_per_epoch: None,
            lr0: 0.001,
            lr_decay: 0.95,
            lr_decay_every: 10,
            snr_range: [0.0, 20.0],
            crop_frames: 200,
            augment: true,
            checkpoint_every: 10,
            widths: DEFAULT_WIDTHS,
            blocks: DEFAULT_BLOCKS,
            width_scale: 1.0,
            se_reduction: m.se_reduction,
            asp_hidden: m.asp_hidden,
            emb_dim: m.emb_dim,
            n_mels: m.n_mels,
            loss: LossConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`, expected true or false"))),
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items = value.split(',').map(|v| parse::<usize>(key, v.trim())).collect::<Result<Vec<_>>>()?;
    items.try_into().map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values")))
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `baseline`, `unet`, `exunet` or `exunet-l`; the last also returns the lite width scale.
pub fn parse_mode(s: &str) -> Result<(Mode, Option<f64>)> {
    match s {
        "exunet-l" => Ok((Mode::Exunet, Some(LITE_WIDTH_SCALE))),
        other => Ok((other.parse()?, None)),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => {
                let (mode, scale) = parse_mode(v)?;
                self.mode = mode;
                if let Some(s) = scale {
                    self.width_scale = s;
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "speakers_per_batch" => self.speakers_per_batch = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = if v == "auto" { None } else { Some(parse(key, v)?) },
            "lr0" => self.lr0 = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "snr_min" => self.snr_range[0] = parse(key, v)?,
            "snr_max" => self.snr_range[1] = parse(key, v)?,
            "crop_frames" => self.crop_frames = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "widths" => self.widths = parse_list(key, v)?,
            "blocks" => self.blocks = parse_list(key, v)?,
            "width_scale" => self.width_scale = parse(key, v)?,
            "se_reduction" => self.se_reduction = parse(key, v)?,
            "asp_hidden" => self.asp_hidden = parse(key, v)?,
            "emb_dim" => self.emb_dim = parse(key, v)?,
            "n_mels" => self.n_mels = parse(key, v)?,
            "loss.sid" => self.loss.sid = parse_bool(key, v)?,
            "loss.fe" => self.loss.fe = parse_bool(key, v)?,
            "loss.ee" => self.loss.ee = v.parse()?,
            "loss.mse_norm" => {
                self.loss.mse_norm = match v {
                    "perelement" => MseNorm::PerElement,
                    "literal" => MseNorm::Literal,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "loss.w_cce" => self.loss.w_cce = parse(key, v)?,
            "loss.w_mse" => self.loss.w_mse = parse(key, v)?,
            "loss.w_ee" => self.loss.w_ee = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, reason: format!("expected `key = value`, got `{line}`") })?;
            cfg.set(key.trim(), value).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// The same settings in the file format accepted by [`TrainConfig::parse_str`].
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("speakers_per_batch", self.speakers_per_batch.to_string());
        put("steps_per_epoch", self.steps_per_epoch.map_or("auto".into(), |v| v.to_string()));
        put("lr0", self.lr0.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("lr_decay_every", self.lr_decay_every.to_string());
        put("snr_min", self.snr_range[0].to_string());
        put("snr_max", self.snr_range[1].to_string());
        put("crop_frames", self.crop_frames.to_string());
        put("augment", self.augment.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("widths", join(&self.widths));
        put("blocks", join(&self.blocks));
        put("width_scale", self.width_scale.to_string());
        put("se_reduction", self.se_reduction.to_string());
        put("asp_hidden", self.asp_hidden.to_string());
        put("emb_dim", self.emb_dim.to_string());
        put("n_mels", self.n_mels.to_string());
        put("loss.sid", self.loss.sid.to_string());
        put("loss.fe", self.loss.fe.to_string());
        put("loss.ee", self.loss.ee.to_string());
        put(
            "loss.mse_norm",
            match self.loss.mse_norm {
                MseNorm::PerElement => "perelement".into(),
                MseNorm::Literal => "literal".into(),
            },
        );
        put("loss.w_cce", self.loss.w_cce.to_string());
        put("loss.w_mse", self.loss.w_mse.to_string());
        put("loss.w_ee", self.loss.w_ee.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must lie in (0, 1] and lr_decay_every must be positive".into());
        }
        let [lo, hi] = self.snr_range;
        if !(-10.0..=40.0).contains(&lo) || !(-10.0..=40.0).contains(&hi) || lo > hi {
            return bad(format!("snr range [{lo}, {hi}] must be ordered and lie within [-10, 40]"));
        }
        if self.speakers_per_batch == 0 || self.crop_frames == 0 || self.steps_per_epoch == Some(0) {
            return bad("speakers_per_batch, crop_frames and steps_per_epoch must be positive".into());
        }
        if self.loss.w_cce < 0.0 || self.loss.w_mse < 0.0 || self.loss.w_ee < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        self.model_config(1).validate()
    }

    pub fn model_config(&self, n_speakers: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            widths: self.widths,
            blocks: self.blocks,
            se_reduction: self.se_reduction,
            asp_hidden: self.asp_hidden,
            emb_dim: self.emb_dim,
            n_speakers,
            width_scale: self.width_scale,
            n_mels: self.n_mels,
        }
    }

    pub fn frontend_config(&self, sample_rate: u32) -> FrontendConfig {
        FrontendConfig { n_mels: self.n_mels, ..FrontendConfig::for_rate(sample_rate) }
    }

    /// ceil(utterances / 2n) unless overridden.
    pub fn steps_for(&self, total_utterances: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| total_utterances.div_ceil(2 * self.speakers_per_batch).max(1))
    }
}

/// `lr0 * decay^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::EmbeddingTerm;
    use proptest::prelude::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert!((lr_schedule(0, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(9, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(10, &cfg) - 0.00095).abs() < 1e-15);
        assert!((lr_schedule(25, &cfg) - 0.0009025).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn schedule_is_nonincreasing_and_constant_within_periods(e in 0usize..2000) {
            let cfg = TrainConfig::default();
            prop_assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
            prop_assert_eq!(lr_schedule(e, &cfg), lr_schedule(e - e % 10, &cfg));
        }
    }

    #[test]
    fn parses_documented_keys() {
        let text = "# desk run\nmode = exunet-l\nseed=7\nepochs = 2\nwidths = 8,8,16,16,16 # narrow\nblocks=1,1,1,1\nsnr_min=5\nloss.ee = mse\naugment = false\nsteps_per_epoch = 3\n";
        let cfg = TrainConfig::parse_str(text).unwrap();
        assert_eq!(cfg.mode, Mode::Exunet);
        assert_eq!(cfg.width_scale, LITE_WIDTH_SCALE);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.widths, [8, 8, 16, 16, 16]);
        assert_eq!(cfg.snr_range, [5.0, 20.0]);
        assert_eq!(cfg.loss.ee, EmbeddingTerm::Mse);
        assert!(!cfg.augment);
        assert_eq!(cfg.steps_for(1000), 3);
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("mode", "unet").unwrap();
        cfg.set("loss.mse_norm", "literal").unwrap();
        cfg.set("lr0", "0.0003").unwrap();
        assert_eq!(TrainConfig::parse_str(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn reports_line_numbers_and_bad_values() {
        let e = TrainConfig::parse_str("epochs = 3\nnonsense\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = TrainConfig::parse_str("\nwarmup = 3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(TrainConfig::parse_str("lr0 = 0").is_err());
        assert!(TrainConfig::parse_str("snr_max = 45").is_err());
        assert!(TrainConfig::parse_str("snr_min = 15\nsnr_max = 5").is_err());
        assert!(TrainConfig::parse_str("blocks = 1,2").is_err());
    }

    #[test]
    fn default_epoch_length() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.steps_for(160), 8);
        assert_eq!(cfg.steps_for(161), 9);
    }
}
