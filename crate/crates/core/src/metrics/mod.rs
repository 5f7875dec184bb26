//! Trial lists, cosine scoring and detection metrics.

mod eval;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::{stream_rng, Corpus};
use crate::error::{Error, Result};

pub use eval::{
    condition_grid, Condition, ConditionResult, EvalOptions, EvalReport, Evaluator, MetricPair, ReportTable, SNR_GRID,
};

pub const P_TARGET: f64 = 0.05;
pub const C_MISS: f64 = 1.0;
pub const C_FA: f64 = 1.0;

/// Norms below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Parses `<0|1> <enroll_id> <test_id>` lines, keeping their order.
pub fn parse_trials_str(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [label, enroll, test] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label must be 0 or 1, got `{other}`"))),
        };
        if enroll == test {
            return Err(bad(format!("enrollment and test utterance are both `{enroll}`")));
        }
        out.push(Trial { target, enroll: enroll.to_string(), test: test.to_string() });
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 0, reason: "trial list is empty".into() });
    }
    Ok(out)
}

pub fn parse_trials(path: &Path) -> Result<Vec<Trial>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    parse_trials_str(&std::fs::read_to_string(path)?)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    s
}

/// All same-speaker pairs as targets plus `nontargets_per_target` times as
/// many distinct cross-speaker pairs, drawn without replacement.
pub fn generate_trials(corpus: &Corpus, nontargets_per_target: usize, seed: u64) -> Result<Vec<Trial>> {
    let by_spk = corpus.utterances_by_speaker();
    let mut targets = Vec::new();
    for (_, utts) in &by_spk {
        for (a, &i) in utts.iter().enumerate() {
            for &j in &utts[a + 1..] {
                targets.push((i, j));
            }
        }
    }
    let spk_of: Vec<u32> = corpus.manifest.utterances.iter().map(|u| u.speaker_id).collect();
    let n = spk_of.len();
    let cross: Vec<(usize, usize)> =
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).filter(|&(i, j)| spk_of[i] != spk_of[j]).collect();
    if targets.is_empty() || cross.is_empty() {
        return Err(Error::Argument("corpus needs two speakers with two utterances each to form trials".into()));
    }
    let want = (targets.len() * nontargets_per_target).min(cross.len());
    let mut rng = stream_rng(seed, 0x7121);
    let mut picked: Vec<usize> = sample(&mut rng, cross.len(), want).into_vec();
    picked.sort_unstable();
    let mut trials: Vec<Trial> = targets
        .iter()
        .map(|&p| (true, p))
        .chain(picked.iter().map(|&k| (false, cross[k])))
        .map(|(target, (i, j))| Trial { target, enroll: corpus.utterance_key(i), test: corpus.utterance_key(j) })
        .collect();
    trials.sort_by(|a, b| (&a.enroll, &a.test).cmp(&(&b.enroll, &b.test)));
    Ok(trials)
}

/// Cosine similarity; exactly symmetric in its arguments.
pub fn cosine_score<S: num_traits::Float>(a: &[S], b: &[S]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("cannot compare embeddings of length {} and {}", a.len(), b.len())));
    }
    let f = |v: S| v.to_f64().unwrap_or(f64::NAN);
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f(x) * f(y)).sum();
    let na = a.iter().map(|&x| f(x) * f(x)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| f(x) * f(x)).sum::<f64>().sqrt();
    if !(na > NORM_EPS && nb > NORM_EPS) {
        return Err(Error::Numerical("cosine score of a zero (or non-finite) embedding".into()));
    }
    let (lo, hi) = if na <= nb { (na, nb) } else { (nb, na) };
    Ok((dot / (lo * hi)).clamp(-1.0, 1.0))
}

/// Labelled scores of one evaluation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScoreSet {
    /// `(is_target, score)`
    pub entries: Vec<(bool, f64)>,
    pub mode: Option<String>,
    pub condition: Condition,
}

impl TrialScoreSet {
    pub fn new(entries: Vec<(bool, f64)>) -> Self {
        Self { entries, mode: None, condition: Condition::Original }
    }
}

fn check_classes(entries: &[(bool, f64)]) -> Result<(usize, usize)> {
    let nt = entries.iter().filter(|e| e.0).count();
    let nn = entries.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::Argument(format!("need both target and nontarget trials, got {nt} and {nn}")));
    }
    if entries.iter().any(|e| !e.1.is_finite()) {
        return Err(Error::Numerical("non-finite trial score".into()));
    }
    Ok((nt, nn))
}

/// One operating point: accept when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score, in increasing threshold order,
/// followed by the reject-all point at `+inf`.
pub fn det_curve(entries: &[(bool, f64)]) -> Result<Vec<DetPoint>> {
    let (nt, nn) = check_classes(entries)?;
    let mut sorted: Vec<(f64, bool)> = entries.iter().map(|&(t, s)| (s, t)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // below the current threshold: misses (targets) and correct rejections (nontargets)
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        points.push(DetPoint { threshold: s, p_miss: below_t as f64 / nt as f64, p_fa: (nn - below_n) as f64 / nn as f64 });
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 });
    Ok(points)
}

/// Equal error rate and its threshold, linearly interpolated between the
/// two operating points around the crossing of the miss and false-alarm rates.
pub fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    let k = points.iter().position(|p| p.p_miss >= p.p_fa).expect("the reject-all point always crosses");
    if k == 0 {
        return (points[0].p_fa, points[0].threshold);
    }
    let (a, b) = (points[k - 1], points[k]);
    let (da, db) = (a.p_fa - a.p_miss, b.p_fa - b.p_miss);
    let t = da / (da - db);
    let eer = a.p_fa + t * (b.p_fa - a.p_fa);
    let threshold = if b.threshold.is_finite() { a.threshold + t * (b.threshold - a.threshold) } else { a.threshold };
    (eer, threshold)
}

pub fn compute_eer(entries: &[(bool, f64)]) -> Result<(f64, f64)> {
    Ok(eer_from_points(&det_curve(entries)?))
}

pub fn min_dcf_from_points(points: &[DetPoint], p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    points.iter().map(|p| c_miss * p.p_miss * p_target + c_fa * p.p_fa * (1.0 - p_target)).fold(f64::INFINITY, f64::min) / norm
}

pub fn compute_min_dcf(entries: &[(bool, f64)], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) || !(c_miss > 0.0) || !(c_fa > 0.0) {
        return Err(Error::Argument("p_target must lie in (0, 1) and costs must be positive".into()));
    }
    Ok(min_dcf_from_points(&det_curve(entries)?, p_target, c_miss, c_fa))
}

/// `<label> <enroll> <test> <score>` lines.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    let mut s = String::new();
    for (t, v) in trials.iter().zip(scores) {
        let _ = writeln!(s, "{} {} {} {:.6}", u8::from(t.target), t.enroll, t.test, v);
    }
    s
}

/// `threshold p_miss p_fa` lines for external plotting.
pub fn format_det(points: &[DetPoint]) -> String {
    let mut s = String::from("# threshold p_miss p_fa\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.threshold, p.p_miss, p.p_fa);
    }
    s
}
