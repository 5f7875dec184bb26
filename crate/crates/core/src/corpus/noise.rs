use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::voice::{normalize_peak, render_utterance, VoiceParams};
use super::{stream_rng, SourceKind, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{arg, Result};

/// Coarse noise taxonomy: broadband hiss, overlapping talkers, and
/// percussive/tonal events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Stationary,
    BabbleLike,
    Impulsive,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Stationary, NoiseKind::BabbleLike, NoiseKind::Impulsive];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Stationary => "stationary",
            NoiseKind::BabbleLike => "babble_like",
            NoiseKind::Impulsive => "impulsive",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(NoiseKind::Stationary),
            "babble_like" | "babble" => Ok(NoiseKind::BabbleLike),
            "impulsive" => Ok(NoiseKind::Impulsive),
            other => arg(format!("unknown noise kind `{other}`")),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generates `n_clips` noise clips, cycling through `kinds` so every requested
/// kind appears whenever `n_clips >= kinds.len()`.
pub fn synth_noise_pool(
    n_clips: usize,
    duration_s: f64,
    seed: u64,
    kinds: &[NoiseKind],
) -> Result<Vec<Waveform>> {
    if kinds.is_empty() {
        return arg("noise kind set is empty");
    }
    if n_clips < 2 {
        return arg(format!("need at least 2 noise clips, got {n_clips}"));
    }
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return arg(format!("noise duration must be positive, got {duration_s}"));
    }
    let mut kinds = kinds.to_vec();
    kinds.sort_unstable();
    kinds.dedup();
    let sr = DEFAULT_SAMPLE_RATE;
    let n = ((duration_s * sr as f64).round() as usize).max(1);
    let clips = (0..n_clips)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            // stream offset keeps noise generators apart from speaker streams
            let mut rng = stream_rng(seed, 0x4E01_5E00 + i as u64);
            let mut samples = match kind {
                NoiseKind::Stationary => colored_noise(n, &mut rng),
                NoiseKind::BabbleLike => babble(n, sr, &mut rng),
                NoiseKind::Impulsive => impulsive(n, sr, &mut rng),
            };
            normalize_peak(&mut samples, 0.5);
            let mut w = Waveform::new(samples, sr, SourceKind::Noise);
            w.noise_kind = Some(kind);
            w
        })
        .collect();
    Ok(clips)
}

fn colored_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tilt: f64 = rng.random_range(-0.7..0.95);
    let mut prev = 0.0;
    (0..n)
        .map(|_| {
            let white: f64 = StandardNormal.sample(rng);
            prev = tilt * prev + white;
            prev
        })
        .collect()
}

fn babble(n: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let talkers = rng.random_range(3..=6);
    let mut out = vec![0.0; n];
    for _ in 0..talkers {
        let voice = VoiceParams::random(rng);
        let mut v = render_utterance(&voice, n, sr, rng);
        normalize_peak(&mut v, rng.random_range(0.5..1.0));
        out.iter_mut().zip(&v).for_each(|(o, x)| *o += x);
    }
    out
}

/// Sparse decaying events: clicks and short harmonic notes.
fn impulsive(n: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = sr as f64;
    let rate = rng.random_range(2.0..8.0);
    let mut out = vec![0.0; n];
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        t += -u.ln() / rate;
        let start = (t * fs) as usize;
        if start >= n {
            break;
        }
        let decay = rng.random_range(0.01..0.25);
        let amp = rng.random_range(0.3..1.0);
        let tonal = rng.random_bool(0.5);
        let f0 = rng.random_range(110.0..880.0);
        let len = ((decay * 5.0 * fs) as usize).min(n - start);
        for (k, slot) in out[start..start + len].iter_mut().enumerate() {
            let tt = k as f64 / fs;
            let env = amp * (-tt / decay).exp();
            let x = if tonal {
                (1..=4)
                    .map(|h| (std::f64::consts::TAU * f0 * h as f64 * tt).sin() / h as f64)
                    .sum::<f64>()
            } else {
                rng.random_range(-1.0..1.0)
            };
            *slot += env * x;
        }
    }
    // a faint floor keeps every clip at nonzero power
    for slot in out.iter_mut() {
        *slot += 1e-3 * rng.random_range(-1.0..1.0);
    }
    out
}
