//! Attentive statistics pooling over frames.
//!
//! Channels and frequency bins are flattened into one feature axis of size
//! `D = C * F`. A single-hidden-layer scorer assigns each frame a scalar
//! score, the scores are softmax-normalized over time, and the output is the
//! attention-weighted mean followed by the weighted standard deviation.

use super::params::{Builder, Grads, ParamId, ParamStore};
use super::tensor::Tensor4;
use super::Ctx;
use crate::error::{shape, Result};
use crate::scalar::Scalar;

pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AttentiveStatsPool {
    /// `[hidden, features]`
    pub w: ParamId,
    pub b: ParamId,
    /// `[hidden]`
    pub v: ParamId,
    pub features: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct AspCache<S> {
    x: Tensor4<S>,
    act: Vec<S>,
    /// Attention weights, `[batch, frames]`.
    pub alpha: Vec<S>,
    mean: Vec<S>,
    std: Vec<S>,
    floored: Vec<bool>,
}

impl AttentiveStatsPool {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, features: usize, hidden: usize) -> Self {
        b.scoped(name, |b| Self {
            w: b.normal("attn.weight", vec![hidden, features], (1.0 / features as f64).sqrt()),
            b: b.constant("attn.bias", vec![hidden], 0.0),
            v: b.normal("attn.score", vec![hidden], (1.0 / hidden as f64).sqrt()),
            features,
            hidden,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.features
    }

    /// Returns `[batch, 2 * features]` pooled statistics.
    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Vec<S>, AspCache<S>)> {
        let d = x.c() * x.h();
        if d != self.features {
            return shape(format!("pooling expects {} features, latent {:?} has {d}", self.features, x.shape));
        }
        let (n, t, hid) = (x.n(), x.w(), self.hidden);
        let (w, bias, v) = (ps.get(self.w), ps.get(self.b), ps.get(self.v));
        let floor = S::c(VAR_FLOOR);
        let mut act = vec![S::zero(); n * hid * t];
        let mut alpha = vec![S::zero(); n * t];
        let mut mean = vec![S::zero(); n * d];
        let mut std = vec![S::zero(); n * d];
        let mut var = vec![S::zero(); n * d];
        let mut out = vec![S::zero(); n * 2 * d];
        for item in 0..n {
            let h = x.item(item);
            let a = &mut act[item * hid * t..(item + 1) * hid * t];
            for j in 0..hid {
                a[j * t..(j + 1) * t].iter_mut().for_each(|v| *v = bias[j]);
            }
            S::gemm(hid, d, t, S::one(), w, d as isize, 1, h, t as isize, 1, S::one(), a, t as isize, 1);
            a.iter_mut().for_each(|v| *v = v.tanh());
            let al = &mut alpha[item * t..(item + 1) * t];
            for (tt, slot) in al.iter_mut().enumerate() {
                *slot = (0..hid).map(|j| v[j] * a[j * t + tt]).sum();
            }
            softmax_inplace(al);
            for f in 0..d {
                let row = &h[f * t..(f + 1) * t];
                let mu: S = row.iter().zip(al.iter()).map(|(&x, &p)| x * p).sum();
                let m2: S = row.iter().zip(al.iter()).map(|(&x, &p)| x * x * p).sum();
                let k = item * d + f;
                var[k] = m2 - mu * mu;
                mean[k] = mu;
                out[item * 2 * d + f] = mu;
            }
        }
        let floored = ctx.gate(|| var.iter().map(|&v| v <= floor).collect());
        for item in 0..n {
            for f in 0..d {
                let k = item * d + f;
                let sd = if floored[k] { floor.sqrt() } else { var[k].max(floor).sqrt() };
                std[k] = sd;
                out[item * 2 * d + d + f] = sd;
            }
        }
        Ok((out, AspCache { x: x.clone(), act, alpha, mean, std, floored }))
    }

    pub fn backward<S: Scalar>(&self, ps: &ParamStore<S>, grads: &mut Grads<S>, cache: &AspCache<S>, dout: &[S]) -> Tensor4<S> {
        let x = &cache.x;
        let (n, t, d, hid) = (x.n(), x.w(), self.features, self.hidden);
        let (w, v) = (ps.get(self.w), ps.get(self.v));
        let two = S::c(2.0);
        let mut dx = Tensor4::zeros(x.shape);
        let mut dmu_tot = vec![S::zero(); d];
        let mut dm2 = vec![S::zero(); d];
        let mut dalpha = vec![S::zero(); t];
        let mut dpre = vec![S::zero(); hid * t];
        for item in 0..n {
            let h = x.item(item);
            let al = &cache.alpha[item * t..(item + 1) * t];
            let a = &cache.act[item * hid * t..(item + 1) * hid * t];
            let g = &dout[item * 2 * d..(item + 1) * 2 * d];
            for f in 0..d {
                let k = item * d + f;
                let dvar = if cache.floored[k] { S::zero() } else { g[d + f] / (two * cache.std[k]) };
                dm2[f] = dvar;
                dmu_tot[f] = g[f] - two * cache.mean[k] * dvar;
            }
            let dh = dx.item_mut(item);
            dalpha.iter_mut().for_each(|v| *v = S::zero());
            for f in 0..d {
                let row = &h[f * t..(f + 1) * t];
                let drow = &mut dh[f * t..(f + 1) * t];
                let (gm, g2) = (dmu_tot[f], dm2[f]);
                for tt in 0..t {
                    let xv = row[tt];
                    drow[tt] = al[tt] * (gm + two * xv * g2);
                    dalpha[tt] += xv * gm + xv * xv * g2;
                }
            }
            // softmax backward
            let dot: S = al.iter().zip(&dalpha).map(|(&p, &q)| p * q).sum();
            let de: Vec<S> = al.iter().zip(&dalpha).map(|(&p, &q)| p * (q - dot)).collect();
            {
                let gv = grads.get_mut(self.v);
                for j in 0..hid {
                    gv[j] += (0..t).map(|tt| a[j * t + tt] * de[tt]).sum::<S>();
                }
            }
            for j in 0..hid {
                for tt in 0..t {
                    let av = a[j * t + tt];
                    dpre[j * t + tt] = v[j] * de[tt] * (S::one() - av * av);
                }
            }
            {
                let gb = grads.get_mut(self.b);
                for j in 0..hid {
                    gb[j] += dpre[j * t..(j + 1) * t].iter().copied().sum::<S>();
                }
            }
            // dW += dpre * H^T
            S::gemm(hid, t, d, S::one(), &dpre, t as isize, 1, h, 1, t as isize, S::one(), grads.get_mut(self.w), d as isize, 1);
            // dH += W^T * dpre
            S::gemm(d, hid, t, S::one(), w, 1, d as isize, &dpre, t as isize, 1, S::one(), dh, t as isize, 1);
        }
        dx
    }
}

pub fn softmax_inplace<S: Scalar>(v: &mut [S]) {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    v.iter_mut().for_each(|x| {
        *x = (*x - m).exp();
        z += *x;
    });
    v.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pool(features: usize) -> (ParamStore<f64>, AttentiveStatsPool) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let p = AttentiveStatsPool::new(&mut Builder::new(&mut ps, &mut rng), "asp", features, 16);
        (ps, p)
    }

    #[test]
    fn attention_is_a_distribution() {
        let (ps, p) = pool(12);
        let x = Tensor4::from_vec([3, 4, 3, 7], (0..252).map(|v| ((v * 31) % 17) as f64 * 0.2 - 1.5).collect()).unwrap();
        let (out, cache) = p.forward(&ps, &mut Ctx::train(), &x).unwrap();
        assert_eq!(out.len(), 3 * 24);
        for item in 0..3 {
            let s: f64 = cache.alpha[item * 7..(item + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_input_under_uniform_attention_has_no_spread() {
        let (mut ps, p) = pool(6);
        ps.get_mut(p.v).iter_mut().for_each(|v| *v = 0.0);
        let mut data = Vec::new();
        for f in 0..6 {
            data.extend(std::iter::repeat(f as f64 * 0.5 - 1.0).take(9));
        }
        let x = Tensor4::from_vec([1, 2, 3, 9], data).unwrap();
        let (out, cache) = p.forward(&ps, &mut Ctx::train(), &x).unwrap();
        assert!(cache.alpha.iter().all(|&a| (a - 1.0 / 9.0).abs() < 1e-15));
        for f in 0..6 {
            assert!((out[f] - (f as f64 * 0.5 - 1.0)).abs() < 1e-12);
            assert!(out[6 + f] <= VAR_FLOOR.sqrt() + 1e-15);
        }
    }

    #[test]
    fn single_frame() {
        let (ps, p) = pool(4);
        let x = Tensor4::from_vec([1, 4, 1, 1], vec![0.3, -0.2, 1.5, 0.0]).unwrap();
        let (out, cache) = p.forward(&ps, &mut Ctx::train(), &x).unwrap();
        assert_eq!(cache.alpha, vec![1.0]);
        assert_eq!(&out[..4], &[0.3, -0.2, 1.5, 0.0]);
        assert!(out[4..].iter().all(|&s| s <= VAR_FLOOR.sqrt() + 1e-15));
    }
}
