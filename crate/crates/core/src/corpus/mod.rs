//! Synthetic speaker corpus, noise pool and additive mixing.
//!
//! Speakers are rendered by a source-filter model: each speaker owns a pitch
//! range and a fixed set of resonances, so identities are separable by their
//! spectral envelope while every utterance has its own phrase contour.

mod mix;
mod noise;
pub mod voice;
mod wav;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

pub use mix::{mix_at_snr, mix_at_snr_with_offset, power, Mixture};
pub use noise::{synth_noise_pool, NoiseKind};
pub use voice::VoiceParams;
pub use wav::{read_wav, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Clean,
    Noise,
    Mixed,
}

/// Mono waveform with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: Option<u32>,
    pub source_kind: SourceKind,
    /// Present iff `source_kind == Mixed`.
    pub snr_db: Option<f64>,
    /// Label of a noise clip, or of the noise used in a mixture.
    pub noise_kind: Option<NoiseKind>,
    /// Peak-normalization gain applied after mixing (1.0 when none was needed).
    pub gain: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_kind: SourceKind) -> Self {
        Self {
            samples,
            sample_rate,
            speaker_id: None,
            source_kind,
            snr_db: None,
            noise_kind: None,
            gain: 1.0,
        }
    }

    pub fn clean(samples: Vec<f64>, sample_rate: u32, speaker_id: Option<u32>) -> Self {
        Self { speaker_id, ..Self::new(samples, sample_rate, SourceKind::Clean) }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return arg("waveform has no samples");
        }
        if self.sample_rate == 0 {
            return arg("sample rate must be positive");
        }
        if self.samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("waveform contains non-finite samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerDescriptor {
    pub id: u32,
    pub seed: u64,
    pub voice: VoiceParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub speaker_id: u32,
    pub utterance_index: u32,
    pub duration_s: f64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub id: u32,
    pub kind: NoiseKind,
    pub path: String,
}

/// JSON-serializable index of a corpus directory. Field order is the key order on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub sample_rate: u32,
    pub speakers: Vec<SpeakerDescriptor>,
    pub utterances: Vec<UtteranceEntry>,
    pub noise: Vec<NoiseEntry>,
    pub noise_train: Vec<u32>,
    pub noise_test: Vec<u32>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.noise_train.iter().find(|id| self.noise_test.contains(id)) {
            return arg(format!("noise clip {id} is in both train and test pools"));
        }
        for s in &self.speakers {
            let n = self.utterances.iter().filter(|u| u.speaker_id == s.id).count();
            if n < 2 {
                return arg(format!("speaker {} has {n} utterances, need at least 2", s.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// In-memory corpus: manifest plus the audio it indexes, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<Waveform>,
    pub noise: Vec<Waveform>,
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn speaker_seed(seed: u64, speaker: u32) -> u64 {
    // splitmix64 step keeps per-speaker seeds decorrelated for adjacent ids
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(speaker as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders `n_speakers * utts_per_speaker` clean utterances of `duration_s` seconds.
pub fn synth_speaker_corpus(
    n_speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Corpus> {
    synth_speaker_corpus_at(n_speakers, utts_per_speaker, duration_s, seed, DEFAULT_SAMPLE_RATE)
}

pub fn synth_speaker_corpus_at(
    n_speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
) -> Result<Corpus> {
    if n_speakers < 2 {
        return arg(format!("need at least 2 speakers, got {n_speakers}"));
    }
    if utts_per_speaker < 2 {
        return arg(format!("need at least 2 utterances per speaker, got {utts_per_speaker}"));
    }
    if !(duration_s >= 0.5) || !duration_s.is_finite() {
        return arg(format!("utterance duration must be at least 0.5 s, got {duration_s}"));
    }
    if sample_rate == 0 {
        return arg("sample rate must be positive");
    }
    let n_samples = (duration_s * sample_rate as f64).round() as usize;
    let mut speakers = Vec::with_capacity(n_speakers);
    let mut entries = Vec::with_capacity(n_speakers * utts_per_speaker);
    let mut waves = Vec::with_capacity(n_speakers * utts_per_speaker);
    for id in 0..n_speakers as u32 {
        let sseed = speaker_seed(seed, id);
        let voice = VoiceParams::random(&mut stream_rng(sseed, 0));
        for u in 0..utts_per_speaker as u32 {
            let mut rng = stream_rng(sseed, 1 + u as u64);
            let mut samples = voice::render_utterance(&voice, n_samples, sample_rate, &mut rng);
            let peak = rand::Rng::random_range(&mut rng, 0.3..0.9);
            voice::normalize_peak(&mut samples, peak);
            waves.push(Waveform::clean(samples, sample_rate, Some(id)));
            entries.push(UtteranceEntry {
                speaker_id: id,
                utterance_index: u,
                duration_s: n_samples as f64 / sample_rate as f64,
                path: format!("wav/spk{id:04}_utt{u:03}.wav"),
            });
        }
        speakers.push(SpeakerDescriptor { id, seed: sseed, voice });
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            seed,
            sample_rate,
            speakers,
            utterances: entries,
            noise: Vec::new(),
            noise_train: Vec::new(),
            noise_test: Vec::new(),
        },
        utterances: waves,
        noise: Vec::new(),
    })
}

/// Splits a pool into disjoint train/test parts; each part keeps the pool order.
pub fn split_noise_pool(
    pool: &[Waveform],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Waveform>, Vec<Waveform>)> {
    let (train, test) = split_indices(pool.len(), test_fraction, seed)?;
    Ok((
        train.iter().map(|&i| pool[i].clone()).collect(),
        test.iter().map(|&i| pool[i].clone()).collect(),
    ))
}

pub fn split_indices(len: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return arg(format!("test fraction must lie in (0, 1), got {test_fraction}"));
    }
    if len < 2 {
        return arg(format!("noise pool of {len} clips cannot be split into two nonempty parts"));
    }
    let n_test = ((len as f64 * test_fraction).round() as usize).clamp(1, len - 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, 0x5EED));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

impl Corpus {
    /// Installs a noise pool and records its train/test split in the manifest.
    pub fn attach_noise(&mut self, pool: Vec<Waveform>, test_fraction: f64, seed: u64) -> Result<()> {
        let (train, test) = split_indices(pool.len(), test_fraction, seed)?;
        self.manifest.noise = pool
            .iter()
            .enumerate()
            .map(|(i, w)| NoiseEntry {
                id: i as u32,
                kind: w.noise_kind.unwrap_or(NoiseKind::Stationary),
                path: format!("noise/noise{i:04}.wav"),
            })
            .collect();
        self.manifest.noise_train = train.into_iter().map(|i| i as u32).collect();
        self.manifest.noise_test = test.into_iter().map(|i| i as u32).collect();
        self.noise = pool;
        Ok(())
    }

    pub fn noise_train(&self) -> Vec<&Waveform> {
        self.manifest.noise_train.iter().map(|&i| &self.noise[i as usize]).collect()
    }

    pub fn noise_test(&self) -> Vec<&Waveform> {
        self.manifest.noise_test.iter().map(|&i| &self.noise[i as usize]).collect()
    }

    pub fn speaker_ids(&self) -> Vec<u32> {
        self.manifest.speakers.iter().map(|s| s.id).collect()
    }

    /// Indices into `utterances` for each speaker, in speaker order.
    pub fn utterances_by_speaker(&self) -> Vec<(u32, Vec<usize>)> {
        self.manifest
            .speakers
            .iter()
            .map(|s| {
                let idx = self
                    .manifest
                    .utterances
                    .iter()
                    .enumerate()
                    .filter(|(_, u)| u.speaker_id == s.id)
                    .map(|(i, _)| i)
                    .collect();
                (s.id, idx)
            })
            .collect()
    }

    /// Utterance key used in trial lists, e.g. `spk0003/utt001`.
    pub fn utterance_key(&self, index: usize) -> String {
        let u = &self.manifest.utterances[index];
        format!("spk{:04}/utt{:03}", u.speaker_id, u.utterance_index)
    }

    pub fn find_utterance(&self, key: &str) -> Option<usize> {
        (0..self.utterances.len()).find(|&i| self.utterance_key(i) == key)
    }

    /// Writes `manifest.json`, `wav/` and `noise/` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.manifest.validate()?;
        fs::create_dir_all(dir.join("wav"))?;
        fs::create_dir_all(dir.join("noise"))?;
        for (entry, wave) in self.manifest.utterances.iter().zip(&self.utterances) {
            write_wav(&dir.join(&entry.path), wave)?;
        }
        for (entry, wave) in self.manifest.noise.iter().zip(&self.noise) {
            write_wav(&dir.join(&entry.path), wave)?;
        }
        fs::write(dir.join("manifest.json"), self.manifest.to_json()?)?;
        Ok(())
    }

    /// Loads a corpus directory written by [`Corpus::write_to`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::NotFound(path));
        }
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        manifest.validate()?;
        let utterances = manifest
            .utterances
            .iter()
            .map(|u| {
                let mut w = read_wav(&dir.join(&u.path))?;
                w.speaker_id = Some(u.speaker_id);
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let noise = manifest
            .noise
            .iter()
            .map(|n| {
                let mut w = read_wav(&dir.join(&n.path))?;
                w.source_kind = SourceKind::Noise;
                w.noise_kind = Some(n.kind);
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, utterances, noise })
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiny_corpus_is_reproducible() {
        let a = synth_speaker_corpus(2, 2, 1.0, 7).unwrap();
        let b = synth_speaker_corpus(2, 2, 1.0, 7).unwrap();
        assert_eq!(a.manifest.utterances.len(), 4);
        assert_eq!(a.manifest.speakers.len(), 2);
        assert_eq!(a.manifest.to_json().unwrap(), b.manifest.to_json().unwrap());
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.samples, y.samples);
        }
    }

    #[test]
    fn every_speaker_gets_its_utterances() {
        let c = synth_speaker_corpus(20, 10, 2.0, 1).unwrap();
        assert_eq!(c.utterances.len(), 200);
        for id in 0..20u32 {
            let n = c.manifest.utterances.iter().filter(|u| u.speaker_id == id).count();
            assert_eq!(n, 10);
        }
        for w in &c.utterances {
            assert!(w.samples.iter().all(|x| x.abs() <= 1.0));
            assert_eq!(w.len(), 32_000);
        }
    }

    #[test]
    fn seeds_change_the_audio() {
        let a = synth_speaker_corpus(2, 2, 1.0, 1).unwrap();
        let b = synth_speaker_corpus(2, 2, 1.0, 2).unwrap();
        let first_a = &a.utterances[0].samples[..100];
        let first_b = &b.utterances[0].samples[..100];
        assert!(first_a.iter().zip(first_b).any(|(x, y)| x != y));
    }

    #[test]
    fn corpus_rejects_bad_counts() {
        assert!(matches!(synth_speaker_corpus(1, 2, 1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(synth_speaker_corpus(2, 1, 1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(synth_speaker_corpus(2, 2, 0.4, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn split_sizes() {
        let pool = synth_noise_pool(10, 0.5, 1, &[NoiseKind::Stationary]).unwrap();
        let (train, test) = split_noise_pool(&pool, 0.3, 5).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let (train2, test2) = split_noise_pool(&pool, 0.3, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);

        let (a, b) = split_indices(2, 0.5, 9).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = synth_speaker_corpus(2, 2, 0.5, 3).unwrap();
        c.attach_noise(synth_noise_pool(4, 0.5, 3, &NoiseKind::ALL).unwrap(), 0.5, 3)
            .unwrap();
        c.write_to(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        assert_eq!(back.noise_test().len(), 2);
        for (x, y) in back.utterances.iter().zip(&c.utterances) {
            let err = x.samples.iter().zip(&y.samples).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1.0 / 32768.0);
        }
    }

    proptest! {
        #[test]
        fn split_is_a_disjoint_partition(len in 2usize..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let (train, test) = split_indices(len, frac, seed).unwrap();
            prop_assert!(!train.is_empty() && !test.is_empty());
            prop_assert!(train.iter().all(|i| !test.contains(i)));
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        }
    }
}
