//! Paired clean/noisy mini-batches: one clean utterance and one noise-corrupted
//! utterance for each of `n` randomly chosen speakers.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{mix_at_snr_with_offset, Corpus, Waveform};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, MelSpec};
use crate::model::stack_specs;
use crate::nn::Tensor4;
use crate::scalar::Scalar;

/// Class indices for the speakers of a corpus, in ascending id order.
#[derive(Debug, Clone)]
pub struct SpeakerIndex {
    pub speakers: Vec<(u32, Vec<usize>)>,
}

impl SpeakerIndex {
    pub fn new(corpus: &Corpus) -> Self {
        Self { speakers: corpus.utterances_by_speaker() }
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn total_utterances(&self) -> usize {
        self.speakers.iter().map(|(_, u)| u.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub speakers: usize,
    pub crop_frames: usize,
    pub snr_range: [f64; 2],
    /// When false the second utterance is used clean (no noise augmentation).
    pub augment: bool,
}

/// Random choices for one pair; materialized into features separately.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    pub class: usize,
    pub speaker: u32,
    /// Corpus indices of the clean and the to-be-corrupted utterance.
    pub clean_utt: usize,
    pub noisy_utt: usize,
    pub noise: usize,
    pub noise_offset: usize,
    pub snr_db: f64,
    pub clean_start: usize,
    pub noisy_start: usize,
}

/// `2n` inputs (clean items first), their clean targets, and per-item labels.
#[derive(Debug, Clone)]
pub struct MiniBatch<S> {
    pub inputs: Tensor4<S>,
    pub targets: Tensor4<S>,
    pub labels: Vec<usize>,
    pub pairs: Vec<PairPlan>,
}

impl<S: Scalar> MiniBatch<S> {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }
}

fn crop_start(rng: &mut ChaCha8Rng, len: usize, window: usize) -> usize {
    if len > window {
        rng.random_range(0..=len - window)
    } else {
        0
    }
}

pub fn plan_minibatch(
    corpus: &Corpus,
    index: &SpeakerIndex,
    noise: &[&Waveform],
    spec: &BatchSpec,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairPlan>> {
    if spec.speakers == 0 || spec.speakers > index.len() {
        return Err(Error::Argument(format!("cannot draw {} speakers from a corpus of {}", spec.speakers, index.len())));
    }
    if let Some((id, _)) = index.speakers.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::Argument(format!("speaker {id} has fewer than two utterances")));
    }
    if spec.augment && noise.is_empty() {
        return Err(Error::Argument("training noise pool is empty".into()));
    }
    let [lo, hi] = spec.snr_range;
    let chosen = sample(rng, index.len(), spec.speakers).into_vec();
    let mut plans = Vec::with_capacity(spec.speakers);
    for class in chosen {
        let (speaker, utts) = &index.speakers[class];
        let pick = sample(rng, utts.len(), 2);
        let (clean_utt, noisy_utt) = (utts[pick.index(0)], utts[pick.index(1)]);
        let (noise_idx, noise_offset) = if spec.augment {
            let k = rng.random_range(0..noise.len());
            (k, rng.random_range(0..noise[k].len()))
        } else {
            (0, 0)
        };
        let snr_db = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let clean_start = crop_start(rng, corpus.utterances[clean_utt].len(), window);
        let noisy_start = crop_start(rng, corpus.utterances[noisy_utt].len(), window);
        plans.push(PairPlan { class, speaker: *speaker, clean_utt, noisy_utt, noise: noise_idx, noise_offset, snr_db, clean_start, noisy_start });
    }
    Ok(plans)
}

fn featurize<S: Scalar>(frontend: &Frontend<S>, samples: &[f64], start: usize, window: usize, frames: usize) -> Result<MelSpec<S>> {
    let end = (start + window).min(samples.len());
    let mut spec = frontend.log_mel_samples(&samples[start..end])?;
    if spec.n_frames != frames {
        let t = Tensor4::from_vec([1, 1, spec.n_mels, spec.n_frames], spec.values)?;
        let fixed = if spec.n_frames < frames { t.reflect_pad_frames(frames) } else { t.crop_frames(frames) };
        spec.values = fixed.data;
        spec.n_frames = frames;
    }
    Ok(spec)
}

/// Mixes each planned noisy utterance over its full length, then featurizes
/// the cropped windows.
pub fn materialize<S: Scalar>(
    corpus: &Corpus,
    noise: &[&Waveform],
    plans: Vec<PairPlan>,
    frontend: &Frontend<S>,
    crop_frames: usize,
    augment: bool,
) -> Result<MiniBatch<S>> {
    let window = frontend.config().samples_for_frames(crop_frames);
    let n = plans.len();
    let mut clean1 = Vec::with_capacity(n);
    let mut clean2 = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    for p in &plans {
        let u1 = &corpus.utterances[p.clean_utt];
        let u2 = &corpus.utterances[p.noisy_utt];
        clean1.push(featurize(frontend, &u1.samples, p.clean_start, window, crop_frames)?);
        let target = featurize(frontend, &u2.samples, p.noisy_start, window, crop_frames)?;
        if augment {
            let mix = mix_at_snr_with_offset(u2, noise[p.noise], p.snr_db, p.noise_offset)?;
            noisy.push(featurize(frontend, &mix.wave.samples, p.noisy_start, window, crop_frames)?);
        } else {
            noisy.push(target.clone());
        }
        clean2.push(target);
    }
    let inputs = Tensor4::concat_batch(&stack_specs(&clean1)?, &stack_specs(&noisy)?)?;
    let targets = Tensor4::concat_batch(&stack_specs(&clean1)?, &stack_specs(&clean2)?)?;
    let labels = plans.iter().chain(&plans).map(|p| p.class).collect();
    Ok(MiniBatch { inputs, targets, labels, pairs: plans })
}

pub fn sample_minibatch<S: Scalar>(
    corpus: &Corpus,
    index: &SpeakerIndex,
    noise: &[&Waveform],
    spec: &BatchSpec,
    frontend: &Frontend<S>,
    rng: &mut ChaCha8Rng,
) -> Result<MiniBatch<S>> {
    let window = frontend.config().samples_for_frames(spec.crop_frames);
    let plans = plan_minibatch(corpus, index, noise, spec, window, rng)?;
    materialize(corpus, noise, plans, frontend, spec.crop_frames, spec.augment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_noise_pool, synth_speaker_corpus, NoiseKind};
    use crate::frontend::FrontendConfig;
    use rand::SeedableRng;

    fn corpus() -> Corpus {
        let mut c = synth_speaker_corpus(12, 3, 0.6, 4).unwrap();
        c.attach_noise(synth_noise_pool(6, 1.0, 5, &NoiseKind::ALL).unwrap(), 0.34, 6).unwrap();
        c
    }

    const SPEC: BatchSpec = BatchSpec { speakers: 10, crop_frames: 24, snr_range: [0.0, 20.0], augment: true };

    #[test]
    fn batch_counts_and_pairing() {
        let c = corpus();
        let idx = SpeakerIndex::new(&c);
        let fe = Frontend::<f32>::new(FrontendConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_minibatch(&c, &idx, &c.noise_train(), &SPEC, &fe, &mut rng).unwrap();
        assert_eq!(b.inputs.shape, [20, 1, 64, 24]);
        assert_eq!(b.targets.shape, [20, 1, 64, 24]);
        assert_eq!(b.labels.len(), 20);
        assert_eq!(b.n(), 10);
        let mut speakers: Vec<u32> = b.pairs.iter().map(|p| p.speaker).collect();
        speakers.sort();
        speakers.dedup();
        assert_eq!(speakers.len(), 10);
        for p in &b.pairs {
            assert_ne!(p.clean_utt, p.noisy_utt);
            assert_eq!(c.utterances[p.clean_utt].speaker_id, Some(p.speaker));
            assert_eq!(c.utterances[p.noisy_utt].speaker_id, Some(p.speaker));
            assert!((0.0..20.0).contains(&p.snr_db));
        }
        // clean items are their own targets
        assert_eq!(b.inputs.slice_batch(0, 10), b.targets.slice_batch(0, 10));
        assert_ne!(b.inputs.slice_batch(10, 20), b.targets.slice_batch(10, 20));
        assert_eq!(&b.labels[..10], &b.labels[10..]);
    }

    #[test]
    fn same_seed_same_batch() {
        let c = corpus();
        let idx = SpeakerIndex::new(&c);
        let fe = Frontend::<f32>::new(FrontendConfig::default()).unwrap();
        let draw = |seed| sample_minibatch(&c, &idx, &c.noise_train(), &SPEC, &fe, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b, d) = (draw(3), draw(3), draw(4));
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.inputs, b.inputs);
        assert_ne!(a.pairs, d.pairs);
    }

    #[test]
    fn drawn_snrs_are_uniform() {
        let c = corpus();
        let idx = SpeakerIndex::new(&c);
        let noise = c.noise_train();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut snrs = Vec::new();
        for _ in 0..1000 {
            snrs.extend(plan_minibatch(&c, &idx, &noise, &SPEC, 4000, &mut rng).unwrap().iter().map(|p| p.snr_db));
        }
        let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
        // U(0, 20) has standard deviation 20/sqrt(12); the mean of 10^4 draws is within 0.5 by a wide margin
        assert!((mean - 10.0).abs() < 0.5, "{mean}");
        let var = snrs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / snrs.len() as f64;
        assert!((var - 400.0 / 12.0).abs() < 2.0, "{var}");
    }

    #[test]
    fn clean_only_batches_skip_mixing() {
        let c = corpus();
        let idx = SpeakerIndex::new(&c);
        let fe = Frontend::<f32>::new(FrontendConfig::default()).unwrap();
        let spec = BatchSpec { augment: false, ..SPEC };
        let b = sample_minibatch(&c, &idx, &c.noise_train(), &spec, &fe, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(b.inputs, b.targets);
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        let c = corpus();
        let idx = SpeakerIndex::new(&c);
        let spec = BatchSpec { speakers: 13, ..SPEC };
        let r = plan_minibatch(&c, &idx, &c.noise_train(), &spec, 4000, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn short_utterances_are_reflect_padded() {
        let c = corpus();
        let idx = SpeakerIndex::new(&c);
        let fe = Frontend::<f32>::new(FrontendConfig::default()).unwrap();
        let spec = BatchSpec { speakers: 2, crop_frames: 90, ..SPEC };
        let b = sample_minibatch(&c, &idx, &c.noise_train(), &spec, &fe, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b.inputs.shape, [4, 1, 64, 90]);
        assert!(b.inputs.is_finite());
    }
}
