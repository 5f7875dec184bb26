//! Log-mel feature extraction: 25 ms Hamming frames every 10 ms, zero-padded
//! to a 1024-point FFT, 64 triangular mel bands, log floor and optional
//! per-utterance mean/variance normalization.

mod cache;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::error::{arg, shape, Result};
use crate::scalar::Scalar;

pub use cache::{read_feature_cache, write_feature_cache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Per-utterance, per-band mean/variance normalization over time.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self::for_rate(16_000)
    }
}

impl FrontendConfig {
    pub fn for_rate(sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        Self {
            sample_rate,
            win_len: (0.025 * sr).round() as usize,
            hop_len: (0.010 * sr).round() as usize,
            n_fft: 1024,
            n_mels: 64,
            f_min: 0.0,
            f_max: sr / 2.0,
            log_floor: 1e-6,
            normalize: true,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for `n_samples` input samples, or `None` if shorter than one window.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.win_len).then(|| 1 + (n_samples - self.win_len) / self.hop_len)
    }

    /// Smallest sample count producing `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.win_len + frames.saturating_sub(1) * self.hop_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.win_len == 0 || self.hop_len == 0 {
            return arg("sample rate, window and hop must be positive");
        }
        if self.win_len > self.n_fft {
            return arg(format!("window of {} samples exceeds the {}-point FFT", self.win_len, self.n_fft));
        }
        if self.n_mels == 0 {
            return arg("need at least one mel band");
        }
        if !(self.log_floor > 0.0) {
            return arg("log floor must be positive");
        }
        Ok(())
    }
}

/// Log-mel spectrogram, `n_mels` rows by `n_frames` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec<S> {
    pub values: Vec<S>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub frame_hop_s: f64,
    pub frame_len_s: f64,
    pub n_fft: usize,
    pub sample_rate: u32,
}

impl<S: Scalar> MelSpec<S> {
    pub fn at(&self, band: usize, frame: usize) -> S {
        self.values[band * self.n_frames + frame]
    }

    pub fn row(&self, band: usize) -> &[S] {
        &self.values[band * self.n_frames..(band + 1) * self.n_frames]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Windowed frames, `n_frames` rows of `win_len` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames<S> {
    pub data: Vec<S>,
    pub n_frames: usize,
    pub win_len: usize,
}

/// Triangular mel filters, `n_mels` rows by `n_fft/2 + 1` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<S> {
    pub weights: Vec<S>,
    pub n_mels: usize,
    pub n_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub fn build_mel_filterbank<S: Scalar>(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank<S>> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return arg(format!("invalid band edges {f_min}..{f_max} Hz for Nyquist {nyquist} Hz"));
    }
    if n_mels == 0 || n_fft < 2 {
        return arg("filterbank needs n_mels >= 1 and n_fft >= 2");
    }
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![S::zero(); n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            weights[m * n_bins + k] = S::c(up.min(down).max(0.0));
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        f_min,
        f_max,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

/// Periodic Hamming window.
pub fn hamming<S: Scalar>(len: usize) -> Vec<S> {
    (0..len)
        .map(|n| S::c(0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / len as f64).cos()))
        .collect()
}

/// Reusable feature extractor: window, FFT plan and filterbank are built once
/// and shared read-only.
#[derive(Clone)]
pub struct Frontend<S: Scalar> {
    cfg: FrontendConfig,
    window: Vec<S>,
    fft: Arc<dyn Fft<S>>,
    filterbank: MelFilterbank<S>,
}

impl<S: Scalar> std::fmt::Debug for Frontend<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl<S: Scalar> Frontend<S> {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let filterbank = build_mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { window: hamming(cfg.win_len), fft, filterbank, cfg })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank<S> {
        &self.filterbank
    }

    pub fn frame_signal(&self, samples: &[f64]) -> Result<Frames<S>> {
        let win = self.cfg.win_len;
        let Some(n_frames) = self.cfg.n_frames(samples.len()) else {
            return arg(format!("{} samples is shorter than one {win}-sample window", samples.len()));
        };
        let mut data = Vec::with_capacity(n_frames * win);
        for t in 0..n_frames {
            let start = t * self.cfg.hop_len;
            data.extend(samples[start..start + win].iter().zip(&self.window).map(|(&x, &w)| S::c(x) * w));
        }
        Ok(Frames { data, n_frames, win_len: win })
    }

    /// `|DFT|^2` of each zero-padded frame; `n_bins` rows by `n_frames` columns.
    pub fn power_spectrum(&self, frames: &Frames<S>) -> Result<Vec<S>> {
        if frames.win_len > self.cfg.n_fft || frames.data.len() != frames.n_frames * frames.win_len {
            return shape("frame matrix does not match the FFT size");
        }
        let n_bins = self.cfg.n_bins();
        let t_total = frames.n_frames;
        let mut out = vec![S::zero(); n_bins * t_total];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.fft.get_inplace_scratch_len()];
        for t in 0..t_total {
            buf.iter_mut().for_each(|c| *c = Complex::new(S::zero(), S::zero()));
            for (c, &x) in buf.iter_mut().zip(&frames.data[t * frames.win_len..(t + 1) * frames.win_len]) {
                c.re = x;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out[k * t_total + t] = buf[k].norm_sqr();
            }
        }
        Ok(out)
    }

    /// Mel energies before the log, `n_mels` rows by `n_frames` columns.
    pub fn mel_energies(&self, samples: &[f64]) -> Result<(Vec<S>, usize)> {
        let frames = self.frame_signal(samples)?;
        let power = self.power_spectrum(&frames)?;
        let t = frames.n_frames;
        let fb = &self.filterbank;
        let mut mel = vec![S::zero(); fb.n_mels * t];
        S::gemm(
            fb.n_mels,
            fb.n_bins,
            t,
            S::one(),
            &fb.weights,
            fb.n_bins as isize,
            1,
            &power,
            t as isize,
            1,
            S::zero(),
            &mut mel,
            t as isize,
            1,
        );
        Ok((mel, t))
    }

    pub fn log_mel(&self, wave: &Waveform) -> Result<MelSpec<S>> {
        wave.validate()?;
        if wave.sample_rate != self.cfg.sample_rate {
            return arg(format!(
                "waveform is {} Hz but the frontend expects {} Hz",
                wave.sample_rate, self.cfg.sample_rate
            ));
        }
        self.log_mel_samples(&wave.samples)
    }

    pub fn log_mel_samples(&self, samples: &[f64]) -> Result<MelSpec<S>> {
        let (mut values, n_frames) = self.mel_energies(samples)?;
        let floor = S::c(self.cfg.log_floor);
        values.iter_mut().for_each(|v| *v = (*v + floor).ln());
        if self.cfg.normalize {
            normalize_rows(&mut values, n_frames);
        }
        let sr = self.cfg.sample_rate as f64;
        Ok(MelSpec {
            values,
            n_mels: self.cfg.n_mels,
            n_frames,
            frame_hop_s: self.cfg.hop_len as f64 / sr,
            frame_len_s: self.cfg.win_len as f64 / sr,
            n_fft: self.cfg.n_fft,
            sample_rate: self.cfg.sample_rate,
        })
    }
}

/// Zero-mean, unit-variance rows; rows with (numerically) zero variance become zeros.
pub fn normalize_rows<S: Scalar>(values: &mut [S], row_len: usize) {
    let n = S::from_usize_lossy(row_len);
    for row in values.chunks_mut(row_len) {
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let scale = mean.abs().max(S::one());
        if var.sqrt() <= S::c(1e-10) * scale {
            row.iter_mut().for_each(|v| *v = S::zero());
        } else {
            let inv = var.sqrt().recip();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
}

/// One-shot convenience wrapper around [`Frontend::log_mel`].
pub fn log_mel<S: Scalar>(wave: &Waveform, cfg: &FrontendConfig) -> Result<MelSpec<S>> {
    Frontend::new(cfg.clone())?.log_mel(wave)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceKind;
    use rand::{Rng, SeedableRng};

    fn fe() -> Frontend<f64> {
        Frontend::new(FrontendConfig::default()).unwrap()
    }

    #[test]
    fn frame_counts() {
        let f = fe();
        assert_eq!(f.frame_signal(&vec![0.1; 16_000]).unwrap().n_frames, 98);
        assert_eq!(f.frame_signal(&vec![0.1; 400]).unwrap().n_frames, 1);
        assert!(f.frame_signal(&vec![0.1; 399]).is_err());
    }

    #[test]
    fn zero_frame_has_zero_spectrum() {
        let f = fe();
        let frames = f.frame_signal(&vec![0.0; 400]).unwrap();
        let p = f.power_spectrum(&frames).unwrap();
        assert_eq!(p.len(), 513);
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centered_cosine_peaks_at_its_bin() {
        let f = fe();
        for k in [5usize, 40, 130, 400] {
            let freq = k as f64 * 16_000.0 / 1024.0;
            let s: Vec<f64> = (0..400).map(|n| (std::f64::consts::TAU * freq * n as f64 / 16_000.0).cos()).collect();
            let p = f.power_spectrum(&f.frame_signal(&s).unwrap()).unwrap();
            let argmax = (0..513).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn parseval_holds() {
        let f = fe();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frames = f.frame_signal(&s).unwrap();
        let time_energy: f64 = frames.data.iter().map(|x| x * x).sum();
        let p = f.power_spectrum(&frames).unwrap();
        let weighted: f64 = (0..513).map(|k| if k == 0 || k == 512 { p[k] } else { 2.0 * p[k] }).sum();
        let freq_energy = weighted / 1024.0;
        assert!((freq_energy - time_energy).abs() / time_energy < 1e-6);
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let fb = build_mel_filterbank::<f64>(16_000, 1024, 64, 0.0, 8000.0).unwrap();
        assert_eq!(fb.n_mels, 64);
        assert_eq!(fb.weights.len(), 64 * 513);
        assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
        for m in 0..64 {
            assert!(fb.weights[m * 513..(m + 1) * 513].iter().sum::<f64>() > 0.0, "row {m} empty");
        }
        for k in 1..512 {
            let col: f64 = (0..64).map(|m| fb.weights[m * 513 + k]).sum();
            assert!(col > 0.0, "bin {k} uncovered");
        }
        assert!(build_mel_filterbank::<f64>(16_000, 1024, 64, 100.0, 50.0).is_err());
        assert!(build_mel_filterbank::<f64>(16_000, 1024, 64, 0.0, 9000.0).is_err());
    }

    #[test]
    fn silence_normalizes_to_zeros() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000, SourceKind::Clean);
        let raw = log_mel::<f64>(&w, &FrontendConfig { normalize: false, ..Default::default() }).unwrap();
        assert!(raw.values.iter().all(|&v| (v - 1e-6f64.ln()).abs() < 1e-12));
        let m = fe().log_mel(&w).unwrap();
        assert_eq!((m.n_mels, m.n_frames), (64, 98));
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let m = fe().log_mel(&Waveform::new(s, 16_000, SourceKind::Noise)).unwrap();
        for b in 0..64 {
            let row = m.row(b);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn scaling_shifts_raw_log_mel() {
        let cfg = FrontendConfig { normalize: false, ..Default::default() };
        let f = Frontend::<f64>::new(cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let c = 2.5f64;
        let scaled: Vec<f64> = s.iter().map(|x| c * x).collect();
        let a = f.log_mel_samples(&s).unwrap();
        let b = f.log_mel_samples(&scaled).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((y - x - 2.0 * c.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn output_shape_depends_only_on_length() {
        let f = fe();
        let a = f.log_mel_samples(&vec![0.0; 5000]).unwrap();
        let b = f.log_mel_samples(&(0..5000).map(|i| (i as f64).sin() * 0.1).collect::<Vec<_>>()).unwrap();
        assert_eq!((a.n_mels, a.n_frames), (b.n_mels, b.n_frames));
        assert_eq!(a.n_frames, FrontendConfig::default().n_frames(5000).unwrap());
    }
}
