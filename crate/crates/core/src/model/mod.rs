//! The three systems: encoder-only baseline, U-Net, and the extended U-Net
//! whose extractor embeds the decoder's reconstruction.

pub mod unet;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{stream_rng, Waveform};
use crate::error::{arg, shape, Error, Result};
use crate::frontend::{Frontend, MelSpec};
use crate::nn::asp::AspCache;
use crate::nn::{AttentiveStatsPool, Builder, Ctx, Grads, Linear, ParamId, ParamKind, ParamStore, Tensor4};
use crate::scalar::Scalar;
use unet::{Decoder, DecoderCache, Encoder, EncoderCache, Extractor, ExtractorCache};

pub const DEFAULT_WIDTHS: [usize; 5] = [32, 64, 64, 64, 64];
pub const DEFAULT_BLOCKS: [usize; 4] = [3, 4, 6, 3];
/// Width multiplier of the lightweight extended U-Net.
pub const LITE_WIDTH_SCALE: f64 = 0.58;
pub const APN_INIT_W: f64 = 10.0;
pub const APN_INIT_B: f64 = -5.0;
pub const APN_MIN_W: f64 = 1e-6;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Unet,
    Exunet,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Unet, Mode::Exunet];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Unet => "unet",
            Mode::Exunet => "exunet",
        }
    }

    pub fn has_decoder(self) -> bool {
        self != Mode::Baseline
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "unet" => Ok(Mode::Unet),
            "exunet" => Ok(Mode::Exunet),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Stem width followed by the four stage widths.
    pub widths: [usize; 5],
    /// Residual blocks per stage.
    pub blocks: [usize; 4],
    pub se_reduction: usize,
    pub asp_hidden: usize,
    pub emb_dim: usize,
    pub n_speakers: usize,
    pub width_scale: f64,
    pub n_mels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            widths: DEFAULT_WIDTHS,
            blocks: DEFAULT_BLOCKS,
            se_reduction: 8,
            asp_hidden: 128,
            emb_dim: 256,
            n_speakers: 20,
            width_scale: 1.0,
            n_mels: 64,
        }
    }
}

impl ModelConfig {
    pub fn new(mode: Mode, n_speakers: usize) -> Self {
        Self { mode, n_speakers, ..Self::default() }
    }

    /// The lightweight extended U-Net.
    pub fn lite(n_speakers: usize) -> Self {
        Self { width_scale: LITE_WIDTH_SCALE, ..Self::new(Mode::Exunet, n_speakers) }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn effective_widths(&self) -> [usize; 5] {
        self.widths.map(|w| ((w as f64 * self.width_scale).round() as usize).max(1))
    }

    pub fn freq_after_encoder(&self) -> usize {
        self.n_mels / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 8 || self.n_mels % 8 != 0 {
            return Err(Error::Config(format!("n_mels must be a positive multiple of 8, got {}", self.n_mels)));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("widths and block counts must be positive".into()));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Config(format!("width_scale must be positive, got {}", self.width_scale)));
        }
        if self.se_reduction == 0 || self.asp_hidden == 0 || self.emb_dim == 0 || self.n_speakers == 0 {
            return Err(Error::Config("se_reduction, asp_hidden, emb_dim and n_speakers must be positive".into()));
        }
        Ok(())
    }
}

/// Pooling plus the embedding layer (the map `g`).
#[derive(Debug, Clone)]
pub struct Head {
    pub asp: AttentiveStatsPool,
    pub fc: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct ApnScalars {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub encoder: Encoder,
    pub head: Head,
    pub classifier: Linear,
    pub decoder: Option<Decoder>,
    pub extractor: Option<Extractor>,
    pub apn: Option<ApnScalars>,
}

impl Arch {
    fn build<S: Scalar>(b: &mut Builder<S>, cfg: &ModelConfig, with_decoder: bool) -> Self {
        let w = cfg.effective_widths();
        let (blocks, se) = (&cfg.blocks, cfg.se_reduction);
        let encoder = Encoder::new(b, "enc", &w, blocks, se);
        let features = w[4] * cfg.freq_after_encoder();
        let head = b.scoped("head", |b| Head {
            asp: AttentiveStatsPool::new(b, "asp", features, cfg.asp_hidden),
            fc: Linear::new(b, "fc", 2 * features, cfg.emb_dim),
        });
        let classifier = Linear::new(b, "cls", cfg.emb_dim, cfg.n_speakers);
        let decoder = (with_decoder && cfg.mode.has_decoder()).then(|| Decoder::new(b, "dec", &w, blocks, se));
        let exunet = cfg.mode == Mode::Exunet;
        let extractor = exunet.then(|| Extractor::new(b, "ext", &w, blocks, se));
        let apn = exunet.then(|| {
            b.scoped("apn", |b| ApnScalars { w: b.constant("w", vec![1], APN_INIT_W), b: b.constant("b", vec![1], APN_INIT_B) })
        });
        Self { encoder, head, classifier, decoder, extractor, apn }
    }
}

fn is_training_only(name: &str) -> bool {
    name.starts_with("cls.") || name.starts_with("apn.")
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub arch: Arch,
}

struct Tape<S> {
    padded: usize,
    enc: EncoderCache<S>,
    dec: Option<DecoderCache<S>>,
    ext: Option<ExtractorCache<S>>,
    asp: AspCache<S>,
    pooled: Vec<S>,
}

/// Outputs of one forward pass over a batch of `N` spectrograms.
pub struct ForwardOutputs<S> {
    /// `[N, emb_dim]`
    pub embeddings: Vec<S>,
    /// `[N, n_speakers]`
    pub logits: Vec<S>,
    /// Reconstruction shaped like the input, when a decoder is present.
    pub enhanced: Option<Tensor4<S>>,
    tape: Tape<S>,
}

/// Loss gradients with respect to [`ForwardOutputs`]; absent entries are zero.
#[derive(Debug, Clone)]
pub struct OutputGrads<S> {
    pub embeddings: Option<Vec<S>>,
    pub logits: Option<Vec<S>>,
    pub enhanced: Option<Tensor4<S>>,
}

impl<S> Default for OutputGrads<S> {
    fn default() -> Self {
        Self { embeddings: None, logits: None, enhanced: None }
    }
}

impl<S: Scalar> Model<S> {
    /// Freshly initialized model; the same seed always yields identical weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let arch = Arch::build(&mut Builder::new(&mut params, &mut rng), &cfg, true);
        Ok(Self { cfg, params, arch })
    }

    /// Rebinds named arrays to the architecture of `cfg`. A U-Net may be
    /// loaded without its decoder, which is never used for embedding.
    pub fn from_params(cfg: ModelConfig, source: &ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let with_decoder = cfg.mode != Mode::Unet || source.iter().any(|p| p.name.starts_with("dec."));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layout = ParamStore::<S>::new();
        let arch = Arch::build(&mut Builder::new(&mut layout, &mut rng), &cfg, with_decoder);
        let mut params = ParamStore::new();
        for p in layout.iter() {
            let src = source.by_name(&p.name)?;
            if src.shape != p.shape {
                return shape(format!("parameter `{}` has shape {:?}, expected {:?}", p.name, src.shape, p.shape));
            }
            params.add(p.name.clone(), p.shape.clone(), src.value.clone(), p.kind);
        }
        Ok(Self { cfg, params, arch })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), arch: self.arch.clone() }
    }

    pub fn has_decoder(&self) -> bool {
        self.arch.decoder.is_some()
    }

    /// Learnable scalars of the deployed network: running statistics, the
    /// speaker classifier and the APN scale/bias are not counted.
    pub fn count_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Learnable && !is_training_only(&p.name))
            .map(|p| p.len())
            .sum()
    }

    pub fn apn_scalars(&self) -> Option<(S, S)> {
        self.arch.apn.map(|a| (self.params.get(a.w)[0], self.params.get(a.b)[0]))
    }

    /// Keeps the APN scale strictly positive.
    pub fn clamp_apn(&mut self) {
        if let Some(a) = self.arch.apn {
            let w = &mut self.params.get_mut(a.w)[0];
            *w = w.max(S::c(APN_MIN_W));
        }
    }

    fn check_input(&self, x: &Tensor4<S>) -> Result<()> {
        let [n, c, f, t] = x.shape;
        if n == 0 || t == 0 || c != 1 || f != self.cfg.n_mels {
            return shape(format!("model expects [N, 1, {}, T] input, got {:?}", self.cfg.n_mels, x.shape));
        }
        if !x.is_finite() {
            return Err(Error::Numerical("non-finite input spectrogram".into()));
        }
        Ok(())
    }

    /// Full forward pass for the configured mode. The frame axis is
    /// reflect-padded to a multiple of 4 and the reconstruction cropped back.
    pub fn forward(&self, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<ForwardOutputs<S>> {
        self.check_input(x)?;
        let frames = x.w();
        let padded = frames.div_ceil(4) * 4;
        let xp = x.reflect_pad_frames(padded);
        let ps = &self.params;
        let (feats, enc) = self.arch.encoder.forward(ps, ctx, &xp)?;
        let (mut dec, mut ext, mut enhanced) = (None, None, None);
        let latent = match (self.cfg.mode, &self.arch.decoder) {
            (Mode::Baseline, _) | (Mode::Unet, None) => feats[4].clone(),
            (Mode::Unet, Some(d)) => {
                let (o, _, cache) = d.forward(ps, ctx, &feats)?;
                enhanced = Some(o.crop_frames(frames));
                dec = Some(cache);
                feats[4].clone()
            }
            (Mode::Exunet, Some(d)) => {
                let extractor = self.arch.extractor.as_ref().ok_or_else(|| Error::MissingParam("ext".into()))?;
                let (o, inters, cache) = d.forward(ps, ctx, &feats)?;
                let (lat, ecache) = extractor.forward(ps, ctx, &o, &inters)?;
                enhanced = Some(o.crop_frames(frames));
                dec = Some(cache);
                ext = Some(ecache);
                lat
            }
            (Mode::Exunet, None) => return Err(Error::MissingParam("dec".into())),
        };
        let (pooled, asp) = self.arch.head.asp.forward(ps, ctx, &latent)?;
        let embeddings = self.arch.head.fc.forward(ps, &pooled)?;
        let logits = self.arch.classifier.forward(ps, &embeddings)?;
        Ok(ForwardOutputs { embeddings, logits, enhanced, tape: Tape { padded, enc, dec, ext, asp, pooled } })
    }

    /// Embeddings from the encoder path `g(f_enc(x))`, whatever the mode.
    pub fn encoder_embeddings(&self, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<Vec<S>> {
        self.check_input(x)?;
        let xp = x.reflect_pad_frames(x.w().div_ceil(4) * 4);
        let (feats, _) = self.arch.encoder.forward(&self.params, ctx, &xp)?;
        let (pooled, _) = self.arch.head.asp.forward(&self.params, ctx, &feats[4])?;
        self.arch.head.fc.forward(&self.params, &pooled)
    }

    /// Backpropagates output gradients into parameter gradients.
    pub fn backward(&self, out: &ForwardOutputs<S>, g: &OutputGrads<S>) -> Result<Grads<S>> {
        let ps = &self.params;
        let tape = &out.tape;
        let mut grads = ps.zero_grads();
        let mut d_emb = match &g.embeddings {
            Some(d) if d.len() == out.embeddings.len() => d.clone(),
            Some(d) => return shape(format!("embedding gradient has {} values, expected {}", d.len(), out.embeddings.len())),
            None => vec![S::zero(); out.embeddings.len()],
        };
        if let Some(dl) = &g.logits {
            if dl.len() != out.logits.len() {
                return shape(format!("logit gradient has {} values, expected {}", dl.len(), out.logits.len()));
            }
            let de = self.arch.classifier.backward(ps, &mut grads, &out.embeddings, dl);
            d_emb.iter_mut().zip(de).for_each(|(a, b)| *a += b);
        }
        let d_pooled = self.arch.head.fc.backward(ps, &mut grads, &tape.pooled, &d_emb);
        let d_latent = self.arch.head.asp.backward(ps, &mut grads, &tape.asp, &d_pooled);
        let d_enhanced = match (&g.enhanced, &out.enhanced) {
            (Some(d), Some(o)) if d.shape == o.shape => Some(d.uncrop_frames(tape.padded)),
            (Some(d), Some(o)) => return shape(format!("reconstruction gradient {:?} does not match {:?}", d.shape, o.shape)),
            (Some(_), None) => return Err(Error::Argument("reconstruction gradient given but no decoder ran".into())),
            (None, _) => None,
        };
        let mut dfeats: [Option<Tensor4<S>>; 5] = Default::default();
        match self.cfg.mode {
            Mode::Baseline => dfeats[4] = Some(d_latent),
            Mode::Unet => {
                if let (Some(dec), Some(cache), Some(d_o)) = (&self.arch.decoder, &tape.dec, &d_enhanced) {
                    dfeats = dec.backward(ps, &mut grads, cache, d_o, None);
                }
                match &mut dfeats[4] {
                    Some(d) => d.add_assign(&d_latent),
                    slot => *slot = Some(d_latent),
                }
            }
            Mode::Exunet => {
                let (dec, ext) = (self.arch.decoder.as_ref().expect("exunet decoder"), self.arch.extractor.as_ref().expect("exunet extractor"));
                let (mut d_o, d_inters) = ext.backward(ps, &mut grads, tape.ext.as_ref().expect("extractor tape"), &d_latent);
                if let Some(extra) = &d_enhanced {
                    d_o.add_assign(extra);
                }
                dfeats = dec.backward(ps, &mut grads, tape.dec.as_ref().expect("decoder tape"), &d_o, Some(&d_inters));
            }
        }
        self.arch.encoder.backward(ps, &mut grads, &tape.enc, dfeats);
        Ok(grads)
    }

    /// Deterministic inference embeddings for a batch (batch-norm running statistics).
    pub fn embed(&self, x: &Tensor4<S>) -> Result<Vec<S>> {
        let mut ctx = Ctx::eval();
        match self.cfg.mode {
            Mode::Baseline | Mode::Unet => self.encoder_embeddings(&mut ctx, x),
            Mode::Exunet => Ok(self.forward(&mut ctx, x)?.embeddings),
        }
    }

    pub fn embed_spec(&self, spec: &MelSpec<S>) -> Result<Vec<S>> {
        self.embed(&spec_to_tensor(spec)?)
    }

    /// Waveform to embedding: log-mel features, then the mode's inference path.
    pub fn extract_embedding(&self, wave: &Waveform, frontend: &Frontend<S>) -> Result<Vec<S>> {
        if frontend.config().n_mels != self.cfg.n_mels {
            return arg(format!("frontend has {} mel bands, model expects {}", frontend.config().n_mels, self.cfg.n_mels));
        }
        let emb = self.embed_spec(&frontend.log_mel(wave)?)?;
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(emb)
    }
}

/// Exact learnable count for a configuration (deployed network only).
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::<f32>::new(cfg.clone(), 0)?.count_params())
}

pub fn spec_to_tensor<S: Scalar>(spec: &MelSpec<S>) -> Result<Tensor4<S>> {
    Tensor4::from_vec([1, 1, spec.n_mels, spec.n_frames], spec.values.clone())
}

/// Stacks equally sized spectrograms into `[N, 1, mels, frames]`.
pub fn stack_specs<S: Scalar>(specs: &[MelSpec<S>]) -> Result<Tensor4<S>> {
    let first = specs.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (m, t) = (first.n_mels, first.n_frames);
    let mut data = Vec::with_capacity(specs.len() * m * t);
    for s in specs {
        if (s.n_mels, s.n_frames) != (m, t) {
            return shape(format!("cannot stack {}x{} with {}x{}", s.n_mels, s.n_frames, m, t));
        }
        data.extend_from_slice(&s.values);
    }
    Tensor4::from_vec([specs.len(), 1, m, t], data)
}

#[cfg(test)]
mod tests;
