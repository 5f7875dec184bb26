use super::params::{Builder, Grads, ParamId, ParamStore};
use super::tensor::Tensor4;
use super::Ctx;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    train: bool,
}

/// Pending running-statistic update produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<S> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<S>,
    /// Unbiased batch variance.
    pub batch_var: Vec<S>,
}

impl<S: Scalar> BnUpdate<S> {
    pub fn apply(&self, ps: &mut ParamStore<S>) {
        let m = S::c(BN_MOMENTUM);
        let keep = S::one() - m;
        for (r, &b) in ps.get_mut(self.running_mean).iter_mut().zip(&self.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in ps.get_mut(self.running_var).iter_mut().zip(&self.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.constant("gamma", vec![channels], 1.0),
            beta: b.constant("beta", vec![channels], 0.0),
            running_mean: b.running("running_mean", channels, 0.0),
            running_var: b.running("running_var", channels, 1.0),
            channels,
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> (Tensor4<S>, BnCache<S>) {
        debug_assert_eq!(x.c(), self.channels);
        let (n, c, p) = (x.n(), x.c(), x.plane());
        let count = n * p;
        let eps = S::c(BN_EPS);
        let (mean, var) = if ctx.train {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for b in 0..n {
                let item = x.item(b);
                for ch in 0..c {
                    mean[ch] += item[ch * p..(ch + 1) * p].iter().copied().sum::<S>();
                }
            }
            let inv_count = S::from_usize_lossy(count).recip();
            mean.iter_mut().for_each(|m| *m *= inv_count);
            for b in 0..n {
                let item = x.item(b);
                for ch in 0..c {
                    let m = mean[ch];
                    var[ch] += item[ch * p..(ch + 1) * p].iter().map(|&v| (v - m) * (v - m)).sum::<S>();
                }
            }
            let unbiased: Vec<S> = var
                .iter()
                .map(|&v| if count > 1 { v / S::from_usize_lossy(count - 1) } else { v })
                .collect();
            var.iter_mut().for_each(|v| *v *= inv_count);
            if ctx.record_stats {
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: mean.clone(),
                    batch_var: unbiased,
                });
            }
            (mean, var)
        } else {
            (ps.get(self.running_mean).to_vec(), ps.get(self.running_var).to_vec())
        };
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut y = Tensor4::zeros(x.shape);
        for b in 0..n {
            let off = b * c * p;
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                for i in off + ch * p..off + (ch + 1) * p {
                    let h = (x.data[i] - m) * is;
                    xhat[i] = h;
                    y.data[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        (y, BnCache { xhat, inv_std, train: ctx.train })
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &BnCache<S>,
        dy: &Tensor4<S>,
    ) -> Tensor4<S> {
        let (n, c, p) = (dy.n(), dy.c(), dy.plane());
        let gamma = ps.get(self.gamma);
        let mut sum_dy = vec![S::zero(); c];
        let mut sum_dy_xhat = vec![S::zero(); c];
        for b in 0..n {
            let off = b * c * p;
            for ch in 0..c {
                for i in off + ch * p..off + (ch + 1) * p {
                    sum_dy[ch] += dy.data[i];
                    sum_dy_xhat[ch] += dy.data[i] * cache.xhat[i];
                }
            }
        }
        for ch in 0..c {
            grads.get_mut(self.gamma)[ch] += sum_dy_xhat[ch];
            grads.get_mut(self.beta)[ch] += sum_dy[ch];
        }
        let mut dx = Tensor4::zeros(dy.shape);
        let count = S::from_usize_lossy(n * p);
        for b in 0..n {
            let off = b * c * p;
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                if cache.train {
                    let (mdy, mdyx) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                    for i in off + ch * p..off + (ch + 1) * p {
                        dx.data[i] = scale * (dy.data[i] - mdy - cache.xhat[i] * mdyx);
                    }
                } else {
                    for i in off + ch * p..off + (ch + 1) * p {
                        dx.data[i] = scale * dy.data[i];
                    }
                }
            }
        }
        dx
    }
}

/// Masks `dy` by the positive part of the rectifier output `y`.
pub fn relu_backward<S: Scalar>(y: &Tensor4<S>, dy: &mut Tensor4<S>) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &v)| {
        if v <= S::zero() {
            *g = S::zero()
        }
    });
}
