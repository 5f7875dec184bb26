//! Conv + batch-norm (+ ReLU) units and squeeze-excitation residual stacks.

use super::conv::{Conv2d, ConvTranspose2d};
use super::norm::{relu_backward, BatchNorm2d, BnCache};
use super::params::{Builder, Grads, ParamStore};
use super::se::{SeCache, SqueezeExcite};
use super::tensor::Tensor4;
use super::Ctx;
use crate::error::Result;
use crate::scalar::Scalar;

/// Convolution without bias, batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct UnitCache<S> {
    x: Tensor4<S>,
    bn: BnCache<S>,
    y: Tensor4<S>,
}

impl<S: Scalar> UnitCache<S> {
    pub fn input_shape(&self) -> [usize; 4] {
        self.x.shape
    }
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        relu: bool,
    ) -> Self {
        b.scoped(name, |b| Self {
            conv: Conv2d::new(b, "conv", cin, cout, kernel, stride, pad, false),
            bn: BatchNorm2d::new(b, "bn", cout),
            relu,
        })
    }

    pub fn pointwise<S: Scalar>(b: &mut Builder<S>, name: &str, cin: usize, cout: usize, relu: bool) -> Self {
        Self::new(b, name, cin, cout, (1, 1), (1, 1), (0, 0), relu)
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Tensor4<S>, UnitCache<S>)> {
        let z = self.conv.forward(ps, x)?;
        let (mut y, bn) = self.bn.forward(ps, ctx, &z);
        if self.relu {
            ctx.relu(&mut y.data);
        }
        Ok((y.clone(), UnitCache { x: x.clone(), bn, y }))
    }

    pub fn backward<S: Scalar>(&self, ps: &ParamStore<S>, grads: &mut Grads<S>, cache: &UnitCache<S>, dy: &Tensor4<S>) -> Tensor4<S> {
        let mut g = dy.clone();
        if self.relu {
            relu_backward(&cache.y, &mut g);
        }
        let dz = self.bn.backward(ps, grads, &cache.bn, &g);
        self.conv.backward(ps, grads, &cache.x, &dz)
    }
}

/// Kernel-equals-stride transposed convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct TConvBn {
    pub tconv: ConvTranspose2d,
    pub bn: BatchNorm2d,
}

impl TConvBn {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, cin: usize, cout: usize, kernel: (usize, usize)) -> Self {
        b.scoped(name, |b| Self {
            tconv: ConvTranspose2d::new(b, "tconv", cin, cout, kernel, false),
            bn: BatchNorm2d::new(b, "bn", cout),
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Tensor4<S>, UnitCache<S>)> {
        let z = self.tconv.forward(ps, x)?;
        let (mut y, bn) = self.bn.forward(ps, ctx, &z);
        ctx.relu(&mut y.data);
        Ok((y.clone(), UnitCache { x: x.clone(), bn, y }))
    }

    pub fn backward<S: Scalar>(&self, ps: &ParamStore<S>, grads: &mut Grads<S>, cache: &UnitCache<S>, dy: &Tensor4<S>) -> Tensor4<S> {
        let mut g = dy.clone();
        relu_backward(&cache.y, &mut g);
        let dz = self.bn.backward(ps, grads, &cache.bn, &g);
        self.tconv.backward(ps, grads, &cache.x, &dz)
    }
}

/// Basic residual block: two 3x3 conv-BN layers, SE gating, shortcut, ReLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub se: SqueezeExcite,
    /// 1x1 stride-matched projection when channels or resolution change.
    pub shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<S> {
    c1: UnitCache<S>,
    c2: UnitCache<S>,
    se: SeCache<S>,
    sc: Option<UnitCache<S>>,
    y: Tensor4<S>,
}

impl ResBlock {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, cin: usize, cout: usize, stride: usize, se_reduction: usize) -> Self {
        b.scoped(name, |b| Self {
            conv1: ConvBn::new(b, "conv1", cin, cout, (3, 3), (stride, stride), (1, 1), true),
            conv2: ConvBn::new(b, "conv2", cout, cout, (3, 3), (1, 1), (1, 1), false),
            se: SqueezeExcite::new(b, "se", cout, se_reduction),
            shortcut: (cin != cout || stride != 1)
                .then(|| ConvBn::new(b, "shortcut", cin, cout, (1, 1), (stride, stride), (0, 0), false)),
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Tensor4<S>, ResBlockCache<S>)> {
        let (h1, c1) = self.conv1.forward(ps, ctx, x)?;
        let (h2, c2) = self.conv2.forward(ps, ctx, &h1)?;
        let (mut y, se) = self.se.forward(ps, ctx, &h2)?;
        let sc = match &self.shortcut {
            Some(unit) => {
                let (s, cache) = unit.forward(ps, ctx, x)?;
                y.add_assign(&s);
                Some(cache)
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        ctx.relu(&mut y.data);
        Ok((y.clone(), ResBlockCache { c1, c2, se, sc, y }))
    }

    pub fn backward<S: Scalar>(&self, ps: &ParamStore<S>, grads: &mut Grads<S>, cache: &ResBlockCache<S>, dy: &Tensor4<S>) -> Tensor4<S> {
        let mut g = dy.clone();
        relu_backward(&cache.y, &mut g);
        let dh2 = self.se.backward(ps, grads, &cache.se, &g);
        let dh1 = self.conv2.backward(ps, grads, &cache.c2, &dh2);
        let mut dx = self.conv1.backward(ps, grads, &cache.c1, &dh1);
        match (&self.shortcut, &cache.sc) {
            (Some(unit), Some(c)) => dx.add_assign(&unit.backward(ps, grads, c, &g)),
            _ => dx.add_assign(&g),
        }
        dx
    }
}

/// A sequence of residual blocks; only the first may change width or stride.
#[derive(Debug, Clone)]
pub struct ResStack {
    pub blocks: Vec<ResBlock>,
}

impl ResStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
        stride: usize,
        se_reduction: usize,
    ) -> Self {
        b.scoped(name, |b| Self {
            blocks: (0..depth.max(1))
                .map(|i| {
                    let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                    ResBlock::new(b, &i.to_string(), ci, cout, s, se_reduction)
                })
                .collect(),
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Tensor4<S>, Vec<ResBlockCache<S>>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (y, c) = block.forward(ps, ctx, &h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward<S: Scalar>(&self, ps: &ParamStore<S>, grads: &mut Grads<S>, caches: &[ResBlockCache<S>], dy: &Tensor4<S>) -> Tensor4<S> {
        let mut g = dy.clone();
        for (block, cache) in self.blocks.iter().zip(caches).rev() {
            g = block.backward(ps, grads, cache, &g);
        }
        g
    }
}
