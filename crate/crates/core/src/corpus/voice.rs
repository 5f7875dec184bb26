//! Source-filter voice synthesis used for the synthetic speaker corpus and
//! for babble-like noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed vocal characteristics of one synthetic talker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceParams {
    /// Lowest and highest fundamental frequency of the phrase contour, Hz.
    pub f0_range_hz: [f64; 2],
    /// Resonances as `[center_hz, bandwidth_hz]`, lowest first.
    pub formants: Vec<[f64; 2]>,
    /// One-pole glottal low-pass coefficient in `(0, 1)`.
    pub glottal_tilt: f64,
    /// Aspiration noise level relative to the voiced source.
    pub breathiness: f64,
}

impl VoiceParams {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let f0_lo = rng.random_range(85.0..220.0);
        let f0_hi = f0_lo * rng.random_range(1.2..1.5);
        let bands = [
            (300.0, 900.0),
            (900.0, 2400.0),
            (2300.0, 3400.0),
            (3400.0, 4800.0),
        ];
        let formants = bands
            .iter()
            .map(|&(lo, hi)| [rng.random_range(lo..hi), rng.random_range(60.0..200.0)])
            .collect();
        Self {
            f0_range_hz: [f0_lo, f0_hi],
            formants,
            glottal_tilt: rng.random_range(0.85..0.98),
            breathiness: rng.random_range(0.01..0.08),
        }
    }
}

/// Two-pole resonator with unit gain at its center frequency (approximately).
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center_hz: f64, bandwidth_hz: f64, sample_rate: f64) -> Self {
        let mut r = Self { a1: 0.0, a2: 0.0, gain: 0.0, y1: 0.0, y2: 0.0 };
        r.retune(center_hz, bandwidth_hz, sample_rate);
        r
    }

    fn retune(&mut self, center_hz: f64, bandwidth_hz: f64, sample_rate: f64) {
        let radius = (-std::f64::consts::PI * bandwidth_hz / sample_rate).exp();
        let theta = 2.0 * std::f64::consts::PI * center_hz / sample_rate;
        self.a1 = 2.0 * radius * theta.cos();
        self.a2 = -radius * radius;
        self.gain = 1.0 - radius;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Renders one utterance: a sequence of syllables with a smooth pitch
/// contour, per-syllable formant jitter and short pauses.
pub fn render_utterance(
    voice: &VoiceParams,
    n_samples: usize,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let fs = sample_rate as f64;
    let [f0_lo, f0_hi] = voice.f0_range_hz;
    let contour_rate = rng.random_range(0.5..2.0);
    let contour_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let declination = rng.random_range(0.0..0.15);

    let mut resonators: Vec<Resonator> = voice
        .formants
        .iter()
        .map(|&[c, b]| Resonator::new(c, b, fs))
        .collect();

    let mut out = vec![0.0; n_samples];
    let mut phase = 0.0f64;
    let mut glottal = 0.0f64;
    let mut pos = 0usize;
    while pos < n_samples {
        let syl_len = ((rng.random_range(0.10..0.30) * fs) as usize).max(1);
        let gap_len = (rng.random_range(0.02..0.08) * fs) as usize;
        let jitter: Vec<f64> = voice
            .formants
            .iter()
            .map(|_| rng.random_range(0.92..1.08))
            .collect();
        for (res, (&[c, b], j)) in resonators.iter_mut().zip(voice.formants.iter().zip(&jitter)) {
            res.retune((c * j).min(0.45 * fs), b, fs);
        }
        let end = (pos + syl_len).min(n_samples);
        for (i, slot) in out[pos..end].iter_mut().enumerate() {
            let t = (pos + i) as f64 / fs;
            let env = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / syl_len as f64).cos();
            let wobble = 0.5 + 0.5 * (std::f64::consts::TAU * contour_rate * t + contour_phase).sin();
            let f0 = (f0_lo + (f0_hi - f0_lo) * wobble) * (1.0 - declination * t / 3.0);
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let aspiration = voice.breathiness * rng.random_range(-1.0..1.0);
            glottal = voice.glottal_tilt * glottal + (1.0 - voice.glottal_tilt) * pulse * 8.0;
            let mut y = (glottal + aspiration) * env;
            let mut acc = 0.0;
            for res in resonators.iter_mut() {
                y = res.tick(y);
                acc += y;
            }
            *slot = acc;
        }
        pos = end;
        // pauses decay the filter state naturally
        let gap_end = (pos + gap_len).min(n_samples);
        for slot in out[pos..gap_end].iter_mut() {
            let mut y = 0.0;
            let mut acc = 0.0;
            for res in resonators.iter_mut() {
                y = res.tick(y);
                acc += y;
            }
            *slot = acc;
        }
        pos = gap_end;
    }
    out
}

/// Scales `samples` so the absolute peak equals `peak`; silent input is left unchanged.
pub fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if max > 0.0 {
        let g = peak / max;
        samples.iter_mut().for_each(|x| *x *= g);
    }
}
