//! 2-D convolution (im2col + GEMM) and non-overlapping transposed convolution.

use super::params::{Builder, Grads, ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::{shape, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    /// Kaiming fan-in normal weights; bias (if any) starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let fan_in = cin * kernel.0 * kernel.1;
            let weight = b.normal("weight", vec![cout, cin, kernel.0, kernel.1], (2.0 / fan_in as f64).sqrt());
            let bias = bias.then(|| b.constant("bias", vec![cout], 0.0));
            Self { weight, bias, cin, cout, kernel, stride, pad }
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return shape(format!("input {h}x{w} smaller than kernel {kh}x{kw}"));
        }
        Ok(((h + 2 * ph - kh) / self.stride.0 + 1, (w + 2 * pw - kw) / self.stride.1 + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad == (0, 0)
    }

    fn im2col<S: Scalar>(&self, x: &[S], h: usize, w: usize, ho: usize, wo: usize, col: &mut [S]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let hw = ho * wo;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for a in 0..kh {
                for bb in 0..kw {
                    let row = &mut col[((ci * kh + a) * kw + bb) * hw..((ci * kh + a) * kw + bb + 1) * hw];
                    for oh in 0..ho {
                        let ih = (oh * sh + a) as isize - ph as isize;
                        let dst = &mut row[oh * wo..(oh + 1) * wo];
                        if ih < 0 || ih >= h as isize {
                            dst.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * sw + bb) as isize - pw as isize;
                            *d = if iw < 0 || iw >= w as isize { S::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, col: &[S], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [S]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let hw = ho * wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for a in 0..kh {
                for bb in 0..kw {
                    let row = &col[((ci * kh + a) * kw + bb) * hw..((ci * kh + a) * kw + bb + 1) * hw];
                    for oh in 0..ho {
                        let ih = (oh * sh + a) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ow, &g) in row[oh * wo..(oh + 1) * wo].iter().enumerate() {
                            let iw = (ow * sw + bb) as isize - pw as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor4<S>) -> Result<Tensor4<S>> {
        if x.c() != self.cin {
            return shape(format!("conv expects {} input channels, got {:?}", self.cin, x.shape));
        }
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = self.out_hw(h, w)?;
        let k = self.cin * self.kernel.0 * self.kernel.1;
        let hw = ho * wo;
        let mut y = Tensor4::zeros([x.n(), self.cout, ho, wo]);
        let weight = ps.get(self.weight);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![S::zero(); k * hw] };
        for n in 0..x.n() {
            let cols: &[S] = if self.is_pointwise() {
                x.item(n)
            } else {
                self.im2col(x.item(n), h, w, ho, wo, &mut col);
                &col
            };
            let out = y.item_mut(n);
            S::gemm(self.cout, k, hw, S::one(), weight, k as isize, 1, cols, hw as isize, 1, S::zero(), out, hw as isize, 1);
            if let Some(b) = self.bias {
                for (co, &bv) in ps.get(b).iter().enumerate() {
                    out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        x: &Tensor4<S>,
        dy: &Tensor4<S>,
    ) -> Tensor4<S> {
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (dy.h(), dy.w());
        let k = self.cin * self.kernel.0 * self.kernel.1;
        let hw = ho * wo;
        let weight = ps.get(self.weight);
        let mut dx = Tensor4::zeros(x.shape);
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![S::zero(); k * hw] };
        let mut dcol = vec![S::zero(); k * hw];
        for n in 0..x.n() {
            let g = dy.item(n);
            let cols: &[S] = if pointwise {
                x.item(n)
            } else {
                self.im2col(x.item(n), h, w, ho, wo, &mut col);
                &col
            };
            // dW += dY * col^T
            S::gemm(self.cout, hw, k, S::one(), g, hw as isize, 1, cols, 1, hw as isize, S::one(), grads.get_mut(self.weight), k as isize, 1);
            if let Some(b) = self.bias {
                let db = grads.get_mut(b);
                for co in 0..self.cout {
                    db[co] += g[co * hw..(co + 1) * hw].iter().copied().sum::<S>();
                }
            }
            // dcol = W^T * dY
            if pointwise {
                S::gemm(k, self.cout, hw, S::one(), weight, 1, k as isize, g, hw as isize, 1, S::zero(), dx.item_mut(n), hw as isize, 1);
            } else {
                S::gemm(k, self.cout, hw, S::one(), weight, 1, k as isize, g, hw as isize, 1, S::zero(), &mut dcol, hw as isize, 1);
                self.col2im(&dcol, h, w, ho, wo, dx.item_mut(n));
            }
        }
        dx
    }
}

/// Transposed convolution whose kernel equals its stride, so every output
/// pixel receives exactly one input pixel and spatial size scales exactly.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// Shape `[cin, cout, kh, kw]`.
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, cin: usize, cout: usize, kernel: (usize, usize), bias: bool) -> Self {
        b.scoped(name, |b| {
            let fan_in = cin * kernel.0 * kernel.1;
            let weight = b.normal("weight", vec![cin, cout, kernel.0, kernel.1], (2.0 / fan_in as f64).sqrt());
            let bias = bias.then(|| b.constant("bias", vec![cout], 0.0));
            Self { weight, bias, cin, cout, kernel }
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor4<S>) -> Result<Tensor4<S>> {
        if x.c() != self.cin {
            return shape(format!("transposed conv expects {} channels, got {:?}", self.cin, x.shape));
        }
        let (kh, kw) = self.kernel;
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (h * kh, w * kw);
        let hw = h * w;
        let rows = self.cout * kh * kw;
        let weight = ps.get(self.weight);
        let mut y = Tensor4::zeros([x.n(), self.cout, ho, wo]);
        let mut z = vec![S::zero(); rows * hw];
        for n in 0..x.n() {
            // Z[(co,a,b), hw] = W^T X
            S::gemm(rows, self.cin, hw, S::one(), weight, 1, rows as isize, x.item(n), hw as isize, 1, S::zero(), &mut z, hw as isize, 1);
            let out = y.item_mut(n);
            for co in 0..self.cout {
                let bias = self.bias.map_or(S::zero(), |b| ps.get(b)[co]);
                for a in 0..kh {
                    for bb in 0..kw {
                        let zr = &z[((co * kh + a) * kw + bb) * hw..((co * kh + a) * kw + bb + 1) * hw];
                        for i in 0..h {
                            let orow = &mut out[(co * ho + i * kh + a) * wo..(co * ho + i * kh + a + 1) * wo];
                            for j in 0..w {
                                orow[j * kw + bb] = zr[i * w + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        x: &Tensor4<S>,
        dy: &Tensor4<S>,
    ) -> Tensor4<S> {
        let (kh, kw) = self.kernel;
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (h * kh, w * kw);
        let hw = h * w;
        let rows = self.cout * kh * kw;
        let weight = ps.get(self.weight);
        let mut dx = Tensor4::zeros(x.shape);
        let mut dz = vec![S::zero(); rows * hw];
        for n in 0..x.n() {
            let g = dy.item(n);
            for co in 0..self.cout {
                for a in 0..kh {
                    for bb in 0..kw {
                        let zr = &mut dz[((co * kh + a) * kw + bb) * hw..((co * kh + a) * kw + bb + 1) * hw];
                        for i in 0..h {
                            let grow = &g[(co * ho + i * kh + a) * wo..(co * ho + i * kh + a + 1) * wo];
                            for j in 0..w {
                                zr[i * w + j] = grow[j * kw + bb];
                            }
                        }
                    }
                }
            }
            if let Some(b) = self.bias {
                let db = grads.get_mut(b);
                let plane = ho * wo;
                for co in 0..self.cout {
                    db[co] += g[co * plane..(co + 1) * plane].iter().copied().sum::<S>();
                }
            }
            // dW[ci, rows] += X[ci, hw] * dZ^T
            S::gemm(self.cin, hw, rows, S::one(), x.item(n), hw as isize, 1, &dz, 1, hw as isize, S::one(), grads.get_mut(self.weight), rows as isize, 1);
            // dX = W * dZ
            S::gemm(self.cin, rows, hw, S::one(), weight, rows as isize, 1, &dz, hw as isize, 1, S::zero(), dx.item_mut(n), hw as isize, 1);
        }
        dx
    }
}
