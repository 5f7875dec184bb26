use super::{SourceKind, Waveform};
use crate::error::{arg, Error, Result};

/// Mean squared amplitude.
pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64
}

/// A mixture together with the addends that produced it.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub wave: Waveform,
    /// Noise amplitude scale chosen to hit the requested SNR.
    pub alpha: f64,
    /// `alpha * noise`, tiled/cropped to the clean length, before peak normalization.
    pub scaled_noise: Vec<f64>,
    /// Peak-normalization gain applied to `clean + scaled_noise`.
    pub gain: f64,
}

/// Mixes with the noise read from its first sample.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(mix_at_snr_with_offset(clean, noise, snr_db, 0)?.wave)
}

/// Adds `noise`, looped from `offset` and cropped to the clean length, scaled so
/// that `10 log10(P_clean / P_scaled_noise) = snr_db` over the whole utterance.
pub fn mix_at_snr_with_offset(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    offset: usize,
) -> Result<Mixture> {
    if clean.sample_rate != noise.sample_rate {
        return arg(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        ));
    }
    if clean.is_empty() || noise.is_empty() {
        return arg("cannot mix empty waveforms");
    }
    if !snr_db.is_finite() {
        return arg(format!("snr must be finite, got {snr_db}"));
    }
    let n = clean.len();
    let aligned: Vec<f64> = (0..n).map(|i| noise.samples[(offset + i) % noise.len()]).collect();
    let p_clean = power(&clean.samples);
    let p_noise = power(&aligned);
    if p_clean <= 0.0 {
        return Err(Error::Numerical("clean signal has zero power".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::Numerical("noise has zero power over the mixed region".into()));
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f64> = aligned.iter().map(|x| alpha * x).collect();
    let mut samples: Vec<f64> = clean.samples.iter().zip(&scaled_noise).map(|(c, v)| c + v).collect();
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if gain != 1.0 {
        samples.iter_mut().for_each(|x| *x *= gain);
    }
    let wave = Waveform {
        samples,
        sample_rate: clean.sample_rate,
        speaker_id: clean.speaker_id,
        source_kind: SourceKind::Mixed,
        snr_db: Some(snr_db),
        noise_kind: noise.noise_kind,
        gain,
    };
    Ok(Mixture { wave, alpha, scaled_noise, gain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_noise_pool, NoiseKind};
    use proptest::prelude::*;

    fn tone(n: usize, amp: f64) -> Waveform {
        let s = (0..n).map(|i| amp * (i as f64 * 0.05).sin()).collect();
        Waveform::clean(s, 16_000, Some(0))
    }

    fn measured_snr(clean: &[f64], scaled_noise: &[f64]) -> f64 {
        10.0 * (power(clean) / power(scaled_noise)).log10()
    }

    #[test]
    fn zero_db_equalizes_power() {
        let c = tone(8000, 0.3);
        let noise = &synth_noise_pool(2, 0.3, 1, &[NoiseKind::Stationary]).unwrap()[0];
        let m = mix_at_snr_with_offset(&c, noise, 0.0, 0).unwrap();
        let ratio = power(&m.scaled_noise) / power(&c.samples);
        assert!((ratio - 1.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn twenty_db_is_a_hundredth() {
        let c = tone(8000, 0.3);
        let noise = &synth_noise_pool(2, 1.0, 1, &[NoiseKind::BabbleLike]).unwrap()[1];
        let m = mix_at_snr_with_offset(&c, noise, 20.0, 17).unwrap();
        let ratio = power(&m.scaled_noise) / (power(&c.samples) / 100.0);
        assert!((ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_snrs_are_exact() {
        let c = tone(16000, 0.5);
        for noise in synth_noise_pool(3, 0.7, 4, &NoiseKind::ALL).unwrap() {
            for snr in [0.0, 5.0, 10.0, 15.0, 20.0] {
                let m = mix_at_snr_with_offset(&c, &noise, snr, 123).unwrap();
                assert!((measured_snr(&c.samples, &m.scaled_noise) - snr).abs() < 0.01);
                assert_eq!(m.wave.snr_db, Some(snr));
                assert!(m.wave.samples.iter().all(|x| x.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn clipping_mixture_is_peak_normalized() {
        let c = tone(4000, 0.99);
        let noise = tone(4000, 0.99);
        let m = mix_at_snr_with_offset(&c, &noise, 0.0, 0).unwrap();
        assert!(m.gain < 1.0);
        assert_eq!(m.wave.gain, m.gain);
        let peak = m.wave.samples.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_power_is_rejected() {
        let silent = Waveform::clean(vec![0.0; 100], 16_000, None);
        let c = tone(100, 0.2);
        assert!(matches!(mix_at_snr(&silent, &c, 5.0), Err(Error::Numerical(_))));
        assert!(matches!(mix_at_snr(&c, &silent, 5.0), Err(Error::Numerical(_))));
        let mut other_rate = c.clone();
        other_rate.sample_rate = 8000;
        assert!(matches!(mix_at_snr(&c, &other_rate, 5.0), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn mixture_minus_clean_is_scaled_noise(snr in -5.0f64..30.0, offset in 0usize..500) {
            let c = tone(1000, 0.2);
            let noise = Waveform::new((0..333).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect(), 16_000, SourceKind::Noise);
            let m = mix_at_snr_with_offset(&c, &noise, snr, offset).unwrap();
            for i in 0..c.len() {
                let unnormalized = m.wave.samples[i] / m.gain;
                let expected = m.alpha * noise.samples[(offset + i) % noise.len()];
                prop_assert!((unnormalized - c.samples[i] - expected).abs() < 1e-12);
            }
        }

        #[test]
        fn alpha_decreases_with_snr(lo in -10.0f64..30.0, delta in 0.01f64..10.0) {
            let c = tone(500, 0.2);
            let noise = tone(300, 0.1);
            let a = mix_at_snr_with_offset(&c, &noise, lo, 0).unwrap().alpha;
            let b = mix_at_snr_with_offset(&c, &noise, lo + delta, 0).unwrap().alpha;
            prop_assert!(b < a);
        }
    }
}
