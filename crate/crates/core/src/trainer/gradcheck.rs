//! Central finite differences against the analytic gradient of each loss term.
//!
//! The activation pattern (every rectifier and the pooling variance floor) of
//! the unperturbed pass is recorded and replayed for the perturbed passes, so
//! the differences are taken on one smooth piece of the network.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::objective::objective;
use crate::error::{Error, Result};
use crate::losses::{EmbeddingTerm, LossConfig};
use crate::model::{Mode, Model, ModelConfig};
use crate::nn::{Ctx, Gates, Tensor4};

/// Denominator floor of the relative error, for gradients that are (nearly) zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTerm {
    Cce,
    Mse,
    Apn,
    /// Embedding-level MSE, the ablation alternative to APN.
    EmbMse,
    Total,
}

impl GradTerm {
    pub const ALL: [GradTerm; 5] = [GradTerm::Cce, GradTerm::Mse, GradTerm::Apn, GradTerm::EmbMse, GradTerm::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            GradTerm::Cce => "cce",
            GradTerm::Mse => "mse",
            GradTerm::Apn => "apn",
            GradTerm::EmbMse => "embmse",
            GradTerm::Total => "total",
        }
    }

    /// Whether the term contributes to the objective of `mode`.
    pub fn applies_to(self, mode: Mode) -> bool {
        match self {
            GradTerm::Cce | GradTerm::Total => true,
            GradTerm::Mse => mode.has_decoder(),
            GradTerm::Apn | GradTerm::EmbMse => mode == Mode::Exunet,
        }
    }

    /// Loss configuration that leaves only this term active.
    pub fn loss_config(self) -> LossConfig {
        let only = LossConfig { sid: false, fe: false, ee: EmbeddingTerm::None, ..LossConfig::default() };
        match self {
            GradTerm::Cce => LossConfig { sid: true, ..only },
            GradTerm::Mse => LossConfig { fe: true, ..only },
            GradTerm::Apn => LossConfig { ee: EmbeddingTerm::Apn, ..only },
            GradTerm::EmbMse => LossConfig { ee: EmbeddingTerm::Mse, ..only },
            GradTerm::Total => LossConfig::default(),
        }
    }
}

impl fmt::Display for GradTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTerm::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Speakers per batch (`n`); the batch holds `2n` random spectrograms.
    pub speakers: usize,
    pub frames: usize,
    pub n_params: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn tiny(mode: Mode) -> Self {
        Self {
            model: ModelConfig {
                widths: [6; 5],
                blocks: [1; 4],
                se_reduction: 2,
                asp_hidden: 16,
                emb_dim: 16,
                n_mels: 16,
                ..ModelConfig::new(mode, 4)
            },
            speakers: 4,
            frames: 24,
            n_params: 20,
            h: 1e-3,
            tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermCheck {
    pub mode: Mode,
    pub term: GradTerm,
    pub loss: f64,
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Problem {
    inputs: Tensor4<f64>,
    targets: Tensor4<f64>,
    labels: Vec<usize>,
}

fn random_problem(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Problem {
    let shape = [2 * cfg.speakers, 1, cfg.model.n_mels, cfg.frames];
    let mut draw = || {
        let data = (0..shape.iter().product()).map(|_| StandardNormal.sample(&mut *rng)).collect();
        Tensor4::from_vec(shape, data).expect("shape matches data")
    };
    let inputs = draw();
    let targets = draw();
    let labels = (0..2 * cfg.speakers).map(|i| (i % cfg.speakers) % cfg.model.n_speakers).collect();
    Problem { inputs, targets, labels }
}

fn loss_at(model: &Model<f64>, p: &Problem, loss: &LossConfig, gates: &Gates) -> Result<f64> {
    let mut ctx = Ctx::probe().replaying_gates(gates.clone());
    Ok(objective(model, &mut ctx, &p.inputs, &p.targets, &p.labels, loss)?.0.total)
}

/// Checks one loss term of one mode on `n_params` sampled scalars.
///
/// Scalars are drawn from those with a nonzero analytic gradient; for the
/// embedding terms the APN scale and bias are always included.
pub fn grad_check(cfg: &GradCheckConfig, term: GradTerm) -> Result<TermCheck> {
    let mode = cfg.model.mode;
    if !term.applies_to(mode) {
        return Err(Error::Argument(format!("the {term} term is not part of the {mode} objective")));
    }
    if !(cfg.h > 0.0) || cfg.speakers == 0 || cfg.frames == 0 {
        return Err(Error::Argument("gradient check needs h > 0 and a nonempty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let problem = random_problem(cfg, &mut rng);
    let loss = term.loss_config();
    let mut ctx = Ctx::probe().recording_gates();
    let (value, grads) = objective(&model, &mut ctx, &problem.inputs, &problem.targets, &problem.labels, &loss)?;
    let gates = ctx.take_gates().expect("recording context");

    let mut forced = Vec::new();
    if matches!(term, GradTerm::Apn | GradTerm::Total) {
        if let Some(apn) = model.arch.apn {
            forced.push((apn.w.index(), 0));
            forced.push((apn.b.index(), 0));
        }
    }
    let candidates: Vec<(usize, usize)> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.learnable())
        .flat_map(|(k, p)| (0..p.len()).map(move |i| (k, i)))
        .filter(|&(k, i)| grads.g[k][i] != 0.0 && !forced.contains(&(k, i)))
        .collect();
    let take = cfg.n_params.saturating_sub(forced.len()).min(candidates.len());
    let mut picked = forced;
    picked.extend(sample(&mut rng, candidates.len(), take).into_iter().map(|j| candidates[j]));

    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut probe = model.clone();
    let mut checks = Vec::with_capacity(picked.len());
    for (k, i) in picked {
        let id = probe.params.id(&names[k]).expect("own parameter");
        let base = probe.params.get(id)[i];
        probe.params.get_mut(id)[i] = base + cfg.h;
        let up = loss_at(&probe, &problem, &loss, &gates)?;
        probe.params.get_mut(id)[i] = base - cfg.h;
        let down = loss_at(&probe, &problem, &loss, &gates)?;
        probe.params.get_mut(id)[i] = base;
        let numeric = (up - down) / (2.0 * cfg.h);
        let analytic = grads.g[k][i];
        checks.push(ParamCheck { name: names[k].clone(), index: i, analytic, numeric, rel_err: rel_err(analytic, numeric) });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(TermCheck { mode, term, loss: value.total, passed: max_rel_err <= cfg.tol, max_rel_err, checks })
}

/// Every applicable term of every listed mode.
pub fn grad_check_modes(base: &GradCheckConfig, modes: &[Mode]) -> Result<Vec<TermCheck>> {
    let mut out = Vec::new();
    for &mode in modes {
        let cfg = GradCheckConfig { model: base.model.with_mode(mode), ..base.clone() };
        for term in GradTerm::ALL.into_iter().filter(|t| t.applies_to(mode)) {
            out.push(grad_check(&cfg, term)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_classification_term() {
        let r = grad_check(&GradCheckConfig::tiny(Mode::Baseline), GradTerm::Cce).unwrap();
        assert_eq!(r.checks.len(), 20);
        assert!(r.passed, "max relative error {}", r.max_rel_err);
    }

    #[test]
    fn exunet_reconstruction_only() {
        let r = grad_check(&GradCheckConfig::tiny(Mode::Exunet), GradTerm::Mse).unwrap();
        assert!(r.checks.len() >= 20);
        assert!(r.passed, "max relative error {}", r.max_rel_err);
    }

    #[test]
    fn exunet_apn_includes_scale_and_bias() {
        let r = grad_check(&GradCheckConfig::tiny(Mode::Exunet), GradTerm::Apn).unwrap();
        assert_eq!(&r.checks[0].name, "apn.w");
        assert_eq!(&r.checks[1].name, "apn.b");
        assert!(r.checks[0].analytic != 0.0);
        assert!(r.passed, "max relative error {}", r.max_rel_err);
    }

    #[test]
    fn single_pair_apn_is_constant() {
        let cfg = GradCheckConfig { speakers: 1, ..GradCheckConfig::tiny(Mode::Exunet) };
        let r = grad_check(&cfg, GradTerm::Apn).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.checks.len(), 2);
        for c in &r.checks {
            assert_eq!(c.analytic, 0.0, "{}", c.name);
            assert!(c.numeric.abs() < 1e-12);
        }
    }

    #[test]
    fn inapplicable_terms_are_rejected() {
        assert!(grad_check(&GradCheckConfig::tiny(Mode::Baseline), GradTerm::Mse).is_err());
        assert!(grad_check(&GradCheckConfig::tiny(Mode::Unet), GradTerm::Apn).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
