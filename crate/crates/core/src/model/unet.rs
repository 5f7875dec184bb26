//! Encoder, decoder and extractor networks.

use crate::error::{shape, Result};
use crate::nn::block::{ResBlockCache, UnitCache};
use crate::nn::conv::ConvTranspose2d;
use crate::nn::{Builder, ConvBn, Ctx, Grads, ParamStore, ResStack, TConvBn, Tensor4};
use crate::scalar::Scalar;

pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 1];

/// Stem output followed by the outputs of the four residual stages.
pub type Features<S> = [Tensor4<S>; 5];

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: ConvBn,
    pub stages: Vec<ResStack>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    stem: UnitCache<S>,
    stages: Vec<Vec<ResBlockCache<S>>>,
}

fn stem<S: Scalar>(b: &mut Builder<S>, w0: usize) -> ConvBn {
    ConvBn::new(b, "stem", 1, w0, (7, 7), (2, 1), (3, 3), true)
}

impl Encoder {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, widths: &[usize; 5], blocks: &[usize; 4], se: usize) -> Self {
        b.scoped(name, |b| Self {
            stem: stem(b, widths[0]),
            stages: (0..4)
                .map(|k| ResStack::new(b, &format!("eb{}", k + 1), widths[k], widths[k + 1], blocks[k], STAGE_STRIDES[k], se))
                .collect(),
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Features<S>, EncoderCache<S>)> {
        let (x0, stem) = self.stem.forward(ps, ctx, x)?;
        let mut feats = vec![x0];
        let mut stages = Vec::with_capacity(4);
        for stage in &self.stages {
            let (y, c) = stage.forward(ps, ctx, feats.last().expect("non-empty"))?;
            feats.push(y);
            stages.push(c);
        }
        Ok((to_array(feats), EncoderCache { stem, stages }))
    }

    /// `dfeats[k]` is the gradient flowing into feature `k` from outside the encoder.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &EncoderCache<S>,
        dfeats: [Option<Tensor4<S>>; 5],
    ) -> Tensor4<S> {
        let [d0, d1, d2, d3, d4] = dfeats;
        let outer = [d1, d2, d3, d4];
        let mut g: Option<Tensor4<S>> = None;
        for k in (0..4).rev() {
            g = accumulate(g, outer[k].as_ref());
            if let Some(gk) = &g {
                g = Some(self.stages[k].backward(ps, grads, &cache.stages[k], gk));
            }
        }
        g = accumulate(g, d0.as_ref());
        match g {
            Some(g) => self.stem.backward(ps, grads, &cache.stem, &g),
            None => Tensor4::zeros(cache_input_shape(&cache.stem)),
        }
    }
}

fn cache_input_shape<S: Scalar>(c: &UnitCache<S>) -> [usize; 4] {
    c.input_shape()
}

fn accumulate<S: Scalar>(acc: Option<Tensor4<S>>, add: Option<&Tensor4<S>>) -> Option<Tensor4<S>> {
    match (acc, add) {
        (Some(mut a), Some(b)) => {
            a.add_assign(b);
            Some(a)
        }
        (Some(a), None) => Some(a),
        (None, b) => b.cloned(),
    }
}

fn to_array<S>(v: Vec<Tensor4<S>>) -> Features<S> {
    v.try_into().unwrap_or_else(|_| unreachable!("five feature maps"))
}

#[derive(Debug, Clone)]
pub enum Up {
    Conv(ConvBn),
    TConv(TConvBn),
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub fuse: ConvBn,
    pub stack: ResStack,
    pub up: Up,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// DB1..DB4.
    pub blocks: Vec<DecoderBlock>,
    /// Frequency-doubling projection onto one channel.
    pub out: ConvTranspose2d,
    pub widths: [usize; 5],
}

#[derive(Debug, Clone)]
struct DecoderBlockCache<S> {
    fuse: UnitCache<S>,
    stack: Vec<ResBlockCache<S>>,
    up: UnitCache<S>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<S> {
    blocks: Vec<DecoderBlockCache<S>>,
    out_input: Tensor4<S>,
}

impl Decoder {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, widths: &[usize; 5], blocks: &[usize; 4], se: usize) -> Self {
        b.scoped(name, |b| {
            let blocks = (0..4)
                .map(|i| {
                    // DB(i+1) mirrors EB(4-i): width w[k+1] -> w[k]
                    let k = 3 - i;
                    let (hi, lo) = (widths[k + 1], widths[k]);
                    b.scoped(&format!("db{}", i + 1), |b| DecoderBlock {
                        fuse: ConvBn::pointwise(b, "fuse", 2 * hi, hi, true),
                        stack: ResStack::new(b, "stack", hi, lo, blocks[k], 1, se),
                        up: match STAGE_STRIDES[k] {
                            1 => Up::Conv(ConvBn::pointwise(b, "proj", lo, lo, true)),
                            s => Up::TConv(TConvBn::new(b, "up", lo, lo, (s, s))),
                        },
                    })
                })
                .collect();
            let out = ConvTranspose2d::new(b, "out", 2 * widths[0], 1, (2, 1), true);
            Self { blocks, out, widths: *widths }
        })
    }

    /// Returns the reconstruction and the four block outputs `[db1, db2, db3, db4]`.
    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        ctx: &mut Ctx<S>,
        feats: &Features<S>,
    ) -> Result<(Tensor4<S>, [Tensor4<S>; 4], DecoderCache<S>)> {
        let mut h = feats[4].clone();
        let mut inters = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = &feats[4 - i];
            let cat = Tensor4::concat_channels(&h, skip)?;
            let (f, fuse) = block.fuse.forward(ps, ctx, &cat)?;
            let (s, stack) = block.stack.forward(ps, ctx, &f)?;
            let (y, up) = match &block.up {
                Up::Conv(u) => u.forward(ps, ctx, &s)?,
                Up::TConv(u) => u.forward(ps, ctx, &s)?,
            };
            caches.push(DecoderBlockCache { fuse, stack, up });
            inters.push(y.clone());
            h = y;
        }
        if h.shape[1..] != feats[0].shape[1..] {
            return shape(format!("decoder output {:?} does not match stem output {:?}", h.shape, feats[0].shape));
        }
        let out_input = Tensor4::concat_channels(&h, &feats[0])?;
        let o = self.out.forward(ps, &out_input)?;
        let inters: [Tensor4<S>; 4] = inters.try_into().unwrap_or_else(|_| unreachable!());
        Ok((o, inters, DecoderCache { blocks: caches, out_input }))
    }

    /// Returns gradients with respect to the encoder features.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &DecoderCache<S>,
        d_out: &Tensor4<S>,
        d_inters: Option<&[Tensor4<S>; 4]>,
    ) -> [Option<Tensor4<S>>; 5] {
        let mut dfeats: [Option<Tensor4<S>>; 5] = Default::default();
        let d_cat = self.out.backward(ps, grads, &cache.out_input, d_out);
        let (mut g, d_x0) = d_cat.split_channels(self.widths[0]);
        dfeats[0] = Some(d_x0);
        for i in (0..4).rev() {
            let block = &self.blocks[i];
            let bc = &cache.blocks[i];
            if let Some(d) = d_inters {
                g.add_assign(&d[i]);
            }
            let ds = match &block.up {
                Up::Conv(u) => u.backward(ps, grads, &bc.up, &g),
                Up::TConv(u) => u.backward(ps, grads, &bc.up, &g),
            };
            let df = block.stack.backward(ps, grads, &bc.stack, &ds);
            let dcat = block.fuse.backward(ps, grads, &bc.fuse, &df);
            let hi = self.widths[4 - i];
            let (dh, dskip) = dcat.split_channels(hi);
            dfeats[4 - i] = accumulate(dfeats[4 - i].take(), Some(&dskip));
            if i == 0 {
                // DB1's recurrent input is the latent itself
                dfeats[4] = accumulate(dfeats[4].take(), Some(&dh));
            } else {
                g = dh;
            }
        }
        dfeats
    }
}

/// Encoder-shaped network over the reconstruction that also consumes the
/// decoder's block outputs, one before each stage.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub stem: ConvBn,
    pub fuses: Vec<ConvBn>,
    pub stages: Vec<ResStack>,
    pub widths: [usize; 5],
}

#[derive(Debug, Clone)]
pub struct ExtractorCache<S> {
    stem: UnitCache<S>,
    fuses: Vec<UnitCache<S>>,
    stages: Vec<Vec<ResBlockCache<S>>>,
}

impl Extractor {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, widths: &[usize; 5], blocks: &[usize; 4], se: usize) -> Self {
        b.scoped(name, |b| {
            let stem = stem(b, widths[0]);
            let mut fuses = Vec::new();
            let mut stages = Vec::new();
            for k in 0..4 {
                // stage k sees decoder block 4-k, whose width equals the stage input width
                fuses.push(ConvBn::pointwise(b, &format!("fuse{}", k + 1), 2 * widths[k], widths[k], true));
                stages.push(ResStack::new(b, &format!("eb{}", k + 1), widths[k], widths[k + 1], blocks[k], STAGE_STRIDES[k], se));
            }
            Self { stem, fuses, stages, widths: *widths }
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        ctx: &mut Ctx<S>,
        o: &Tensor4<S>,
        inters: &[Tensor4<S>; 4],
    ) -> Result<(Tensor4<S>, ExtractorCache<S>)> {
        let (mut h, stem) = self.stem.forward(ps, ctx, o)?;
        let mut fuses = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        for k in 0..4 {
            let cat = Tensor4::concat_channels(&h, &inters[3 - k])?;
            let (f, fc) = self.fuses[k].forward(ps, ctx, &cat)?;
            let (y, sc) = self.stages[k].forward(ps, ctx, &f)?;
            fuses.push(fc);
            stages.push(sc);
            h = y;
        }
        Ok((h, ExtractorCache { stem, fuses, stages }))
    }

    /// Returns the gradient for the reconstruction and for each decoder block output.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &ExtractorCache<S>,
        d_latent: &Tensor4<S>,
    ) -> (Tensor4<S>, [Tensor4<S>; 4]) {
        let mut g = d_latent.clone();
        let mut d_inters: Vec<Option<Tensor4<S>>> = vec![None; 4];
        for k in (0..4).rev() {
            let df = self.stages[k].backward(ps, grads, &cache.stages[k], &g);
            let dcat = self.fuses[k].backward(ps, grads, &cache.fuses[k], &df);
            let (dh, dint) = dcat.split_channels(self.widths[k]);
            d_inters[3 - k] = Some(dint);
            g = dh;
        }
        let d_o = self.stem.backward(ps, grads, &cache.stem, &g);
        let d_inters: Vec<Tensor4<S>> = d_inters.into_iter().map(|d| d.expect("filled")).collect();
        (d_o, d_inters.try_into().unwrap_or_else(|_| unreachable!()))
    }
}
