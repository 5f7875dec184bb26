use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_score, det_curve, eer_from_points, min_dcf_from_points, DetPoint, Trial, TrialScoreSet, C_FA, C_MISS, P_TARGET};
use crate::corpus::{mix_at_snr_with_offset, stream_rng, Corpus, NoiseKind, Waveform};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::model::Model;

pub const SNR_GRID: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Condition {
    Original,
    Noisy { noise: NoiseKind, snr_db: f64 },
}

impl Condition {
    pub fn tag(&self) -> String {
        match self {
            Condition::Original => "original".into(),
            Condition::Noisy { noise, snr_db } => format!("{}_{}db", noise.as_str(), snr_db),
        }
    }

    pub fn parse_tag(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Condition::Original);
        }
        let bad = || Error::Config(format!("unknown condition `{s}`"));
        let (kind, snr) = s.rsplit_once('_').ok_or_else(bad)?;
        let noise = NoiseKind::ALL.into_iter().find(|k| k.as_str() == kind).ok_or_else(bad)?;
        let snr_db = snr.strip_suffix("db").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(Condition::Noisy { noise, snr_db })
    }

    pub fn is_noisy(&self) -> bool {
        matches!(self, Condition::Noisy { .. })
    }

    /// Position in the report layout: original first, then kinds by SNR.
    fn order_key(&self) -> (usize, usize, i64) {
        match self {
            Condition::Original => (0, 0, 0),
            Condition::Noisy { noise, snr_db } => (1, *noise as usize, (snr_db * 1000.0).round() as i64),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// `{original}` followed by every kind at every SNR of the grid.
pub fn condition_grid(kinds: &[NoiseKind]) -> Vec<Condition> {
    let mut out = vec![Condition::Original];
    for &noise in kinds {
        out.extend(SNR_GRID.iter().map(|&snr_db| Condition::Noisy { noise, snr_db }));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Corrupt the enrollment side as well as the test side.
    pub corrupt_enroll: bool,
    /// Selects noise clips and offsets for the corrupted utterances.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { corrupt_enroll: false, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub eer: f64,
    pub min_dcf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    /// Column label in reports; the mode unless overridden.
    pub system: String,
    pub mode: String,
    pub condition: Condition,
    pub n_trials: usize,
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub mode: String,
    pub corrupt_enroll: bool,
    pub conditions: Vec<ConditionResult>,
    /// Mean over every condition, as in the average row of the report table.
    pub average: MetricPair,
    /// Mean over the noisy conditions only.
    pub noisy_average: Option<MetricPair>,
}

fn mean_pair<'a>(results: impl Iterator<Item = &'a ConditionResult>) -> Option<MetricPair> {
    let (mut e, mut d, mut k) = (0.0, 0.0, 0usize);
    for r in results {
        e += r.eer;
        d += r.min_dcf;
        k += 1;
    }
    (k > 0).then(|| MetricPair { eer: e / k as f64, min_dcf: d / k as f64 })
}

impl EvalReport {
    pub fn from_results(system: String, mode: String, corrupt_enroll: bool, conditions: Vec<ConditionResult>) -> Result<Self> {
        let average = mean_pair(conditions.iter()).ok_or_else(|| Error::Argument("report has no conditions".into()))?;
        let noisy_average = mean_pair(conditions.iter().filter(|c| c.condition.is_noisy()));
        Ok(Self { system, mode, corrupt_enroll, conditions, average, noisy_average })
    }
}

/// Scores trial lists under clean and noise-corrupted conditions.
pub struct Evaluator<'a> {
    model: &'a Model<f32>,
    frontend: Frontend<f32>,
    corpus: &'a Corpus,
    noise: Vec<&'a Waveform>,
    opts: EvalOptions,
    clean: HashMap<usize, Vec<f32>>,
}

impl<'a> Evaluator<'a> {
    /// `corpus` supplies the trial audio and its test noise pool.
    pub fn new(model: &'a Model<f32>, corpus: &'a Corpus, opts: EvalOptions) -> Result<Self> {
        let fcfg = crate::frontend::FrontendConfig { n_mels: model.cfg.n_mels, ..crate::frontend::FrontendConfig::for_rate(corpus.manifest.sample_rate) };
        Ok(Self { model, frontend: Frontend::new(fcfg)?, corpus, noise: corpus.noise_test(), opts, clean: HashMap::new() })
    }

    fn resolve(&self, key: &str) -> Result<usize> {
        self.corpus.find_utterance(key).ok_or_else(|| Error::Argument(format!("trial utterance `{key}` is not in the corpus")))
    }

    fn clean_embedding(&mut self, utt: usize) -> Result<Vec<f32>> {
        if let Some(e) = self.clean.get(&utt) {
            return Ok(e.clone());
        }
        let e = self.model.extract_embedding(&self.corpus.utterances[utt], &self.frontend)?;
        self.clean.insert(utt, e.clone());
        Ok(e)
    }

    /// The utterance mixed with a test-pool clip of `noise`; clip and offset depend only on the seed and the utterance.
    pub fn corrupt(&self, utt: usize, noise: NoiseKind, snr_db: f64) -> Result<Waveform> {
        let clips: Vec<&Waveform> = self.noise.iter().copied().filter(|w| w.noise_kind == Some(noise)).collect();
        if clips.is_empty() {
            return Err(Error::Argument(format!("test noise pool has no {} clips", noise.as_str())));
        }
        let mut rng = stream_rng(self.opts.seed ^ ((noise as u64 + 1) << 32), utt as u64);
        let clip = clips[rng.random_range(0..clips.len())];
        let offset = rng.random_range(0..clip.len());
        Ok(mix_at_snr_with_offset(&self.corpus.utterances[utt], clip, snr_db, offset)?.wave)
    }

    pub fn score(&mut self, trials: &[Trial], condition: Condition) -> Result<(TrialScoreSet, Vec<f64>)> {
        if let Condition::Noisy { noise, snr_db } = condition {
            if !SNR_GRID.contains(&snr_db) {
                return Err(Error::Argument(format!("SNR {snr_db} dB is outside the evaluation grid {SNR_GRID:?}")));
            }
            if !self.noise.iter().any(|w| w.noise_kind == Some(noise)) {
                return Err(Error::Argument(format!("test noise pool has no {} clips", noise.as_str())));
            }
        }
        let pairs = trials.iter().map(|t| Ok((self.resolve(&t.enroll)?, self.resolve(&t.test)?))).collect::<Result<Vec<_>>>()?;
        let mut noisy: HashMap<usize, Vec<f32>> = HashMap::new();
        let mut embed = |ev: &mut Self, utt: usize, corrupt: bool| -> Result<Vec<f32>> {
            match condition {
                Condition::Noisy { noise, snr_db } if corrupt => {
                    if let Some(e) = noisy.get(&utt) {
                        return Ok(e.clone());
                    }
                    let e = ev.model.extract_embedding(&ev.corrupt(utt, noise, snr_db)?, &ev.frontend)?;
                    noisy.insert(utt, e.clone());
                    Ok(e)
                }
                _ => ev.clean_embedding(utt),
            }
        };
        let mut scores = Vec::with_capacity(trials.len());
        for &(e, t) in &pairs {
            let a = embed(self, e, self.opts.corrupt_enroll)?;
            let b = embed(self, t, true)?;
            scores.push(cosine_score(&a, &b)?);
        }
        let entries = trials.iter().zip(&scores).map(|(t, &s)| (t.target, s)).collect();
        Ok((TrialScoreSet { entries, mode: Some(self.model.cfg.mode.to_string()), condition }, scores))
    }

    /// Scores every condition; returns the report and each condition's scores and DET points.
    pub fn evaluate(
        &mut self,
        system: &str,
        trials: &[Trial],
        conditions: &[Condition],
    ) -> Result<(EvalReport, Vec<(Vec<f64>, Vec<DetPoint>)>)> {
        let mut results = Vec::new();
        let mut curves = Vec::new();
        for &c in conditions {
            let (set, scores) = self.score(trials, c)?;
            let det = det_curve(&set.entries)?;
            let (eer, threshold) = eer_from_points(&det);
            let min_dcf = min_dcf_from_points(&det, P_TARGET, C_MISS, C_FA);
            results.push(ConditionResult {
                system: system.to_string(),
                mode: self.model.cfg.mode.to_string(),
                condition: c,
                n_trials: trials.len(),
                eer,
                min_dcf,
                threshold,
            });
            curves.push((scores, det));
        }
        let report = EvalReport::from_results(system.to_string(), self.model.cfg.mode.to_string(), self.opts.corrupt_enroll, results)?;
        Ok((report, curves))
    }
}

/// Conditions by systems, with an average row over the cells present in each column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub systems: Vec<String>,
    pub conditions: Vec<Condition>,
    /// `cells[condition][system]`
    pub cells: Vec<Vec<Option<MetricPair>>>,
    pub average: Vec<Option<MetricPair>>,
}

impl ReportTable {
    pub fn from_results(results: &[ConditionResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Argument("no condition results to tabulate".into()));
        }
        let mut systems: Vec<String> = Vec::new();
        for r in results {
            if !systems.contains(&r.system) {
                systems.push(r.system.clone());
            }
        }
        let mut by_cond: BTreeMap<(usize, usize, i64), Condition> = BTreeMap::new();
        for r in results {
            by_cond.insert(r.condition.order_key(), r.condition);
        }
        let conditions: Vec<Condition> = by_cond.into_values().collect();
        let mut cells = vec![vec![None; systems.len()]; conditions.len()];
        for r in results {
            let i = conditions.iter().position(|c| c.order_key() == r.condition.order_key()).expect("collected above");
            let j = systems.iter().position(|s| *s == r.system).expect("collected above");
            if cells[i][j].is_some() {
                return Err(Error::Argument(format!("duplicate result for {} / {}", r.system, r.condition)));
            }
            cells[i][j] = Some(MetricPair { eer: r.eer, min_dcf: r.min_dcf });
        }
        let average = (0..systems.len())
            .map(|j| {
                let col: Vec<MetricPair> = cells.iter().filter_map(|row| row[j]).collect();
                let k = col.len() as f64;
                (!col.is_empty()).then(|| MetricPair {
                    eer: col.iter().map(|c| c.eer).sum::<f64>() / k,
                    min_dcf: col.iter().map(|c| c.min_dcf).sum::<f64>() / k,
                })
            })
            .collect();
        Ok(Self { systems, conditions, cells, average })
    }

    /// Fixed-width text: EER in percent and minDCF per cell.
    pub fn render(&self) -> String {
        let cell = |c: &Option<MetricPair>| c.map_or("-".to_string(), |m| format!("{:.2} / {:.3}", 100.0 * m.eer, m.min_dcf));
        let mut rows: Vec<(String, Vec<String>)> =
            self.conditions.iter().zip(&self.cells).map(|(c, r)| (c.tag(), r.iter().map(cell).collect())).collect();
        rows.push(("average (EER % / minDCF)".into(), self.average.iter().map(cell).collect()));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("condition".len());
        let widths: Vec<usize> = (0..self.systems.len())
            .map(|j| rows.iter().map(|r| r.1[j].len()).max().unwrap_or(0).max(self.systems[j].len()))
            .collect();
        let mut s = String::new();
        let _ = write!(s, "{:<w0$}", "condition");
        for (name, w) in self.systems.iter().zip(&widths) {
            let _ = write!(s, " | {name:>w$}");
        }
        s.push('\n');
        let _ = writeln!(s, "{}", "-".repeat(w0 + widths.iter().map(|w| w + 3).sum::<usize>()));
        for (label, vals) in &rows {
            let _ = write!(s, "{label:<w0$}");
            for (v, w) in vals.iter().zip(&widths) {
                let _ = write!(s, " | {v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_noise_pool, synth_speaker_corpus};
    use crate::metrics::generate_trials;
    use crate::model::{Mode, ModelConfig};

    fn result(system: &str, c: Condition, eer: f64) -> ConditionResult {
        ConditionResult { system: system.into(), mode: "baseline".into(), condition: c, n_trials: 10, eer, min_dcf: 2.0 * eer, threshold: 0.0 }
    }

    #[test]
    fn tags_round_trip() {
        for c in condition_grid(&NoiseKind::ALL) {
            assert_eq!(Condition::parse_tag(&c.tag()).unwrap(), c);
        }
        assert_eq!(condition_grid(&NoiseKind::ALL).len(), 16);
        assert!(Condition::parse_tag("rain_5db").is_err());
    }

    #[test]
    fn table_holds_exactly_the_given_cells() {
        let a = Condition::Noisy { noise: NoiseKind::Stationary, snr_db: 0.0 };
        let b = Condition::Original;
        let t = ReportTable::from_results(&[result("exunet", a, 0.2), result("exunet", b, 0.1)]).unwrap();
        assert_eq!(t.conditions, vec![b, a]);
        assert_eq!(t.systems, vec!["exunet".to_string()]);
        let avg = t.average[0].unwrap();
        assert!((avg.eer - 0.15).abs() < 1e-15 && (avg.min_dcf - 0.3).abs() < 1e-15);
        let text = t.render();
        assert_eq!(text.lines().count(), 2 + 3);
        assert!(text.contains("15.00 / 0.300"));
        assert!(ReportTable::from_results(&[result("x", a, 0.1), result("x", a, 0.2)]).is_err());
    }

    #[test]
    fn original_condition_uses_clean_audio_and_noisy_scores_are_finite() {
        let mut c = synth_speaker_corpus(4, 3, 0.6, 21).unwrap();
        c.attach_noise(synth_noise_pool(6, 1.0, 22, &NoiseKind::ALL).unwrap(), 0.5, 23).unwrap();
        let cfg = ModelConfig { widths: [4; 5], blocks: [1; 4], se_reduction: 2, asp_hidden: 8, emb_dim: 8, n_mels: 16, ..ModelConfig::new(Mode::Exunet, 3) };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let trials = generate_trials(&c, 2, 0).unwrap();
        let mut ev = Evaluator::new(&model, &c, EvalOptions::default()).unwrap();
        let (orig, s0) = ev.score(&trials, Condition::Original).unwrap();
        let direct: Vec<f64> = trials
            .iter()
            .map(|t| {
                let fe = Frontend::new(crate::frontend::FrontendConfig { n_mels: 16, ..Default::default() }).unwrap();
                let e = model.extract_embedding(&c.utterances[c.find_utterance(&t.enroll).unwrap()], &fe).unwrap();
                let x = model.extract_embedding(&c.utterances[c.find_utterance(&t.test).unwrap()], &fe).unwrap();
                cosine_score(&e, &x).unwrap()
            })
            .collect();
        assert_eq!(s0, direct);
        assert_eq!(orig.entries.len(), trials.len());
        let noisy = Condition::Noisy { noise: NoiseKind::Stationary, snr_db: 0.0 };
        let (set, s1) = ev.score(&trials, noisy).unwrap();
        assert!(s1.iter().all(|v| v.is_finite()));
        assert_ne!(s0, s1);
        assert_eq!(set.condition, noisy);
        assert!(ev.score(&trials, Condition::Noisy { noise: NoiseKind::Stationary, snr_db: 7.0 }).is_err());
        let bad = vec![Trial { target: true, enroll: "spk0000/utt000".into(), test: "spk0099/utt000".into() }];
        assert!(ev.score(&bad, Condition::Original).is_err());
    }
}
