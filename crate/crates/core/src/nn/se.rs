use super::params::{Builder, Grads, ParamId, ParamStore};
use super::sigmoid;
use super::tensor::Tensor4;
use super::Ctx;
use crate::error::{shape, Result};
use crate::scalar::Scalar;

/// Squeeze-and-excitation: per-channel gates from a bottleneck over the
/// global average of each channel.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    /// `[hidden, channels]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[channels, hidden]`
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct SeCache<S> {
    x: Tensor4<S>,
    squeezed: Vec<S>,
    hidden: Vec<S>,
    pub gates: Vec<S>,
}

impl SqueezeExcite {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        b.scoped(name, |b| Self {
            w1: b.normal("fc1.weight", vec![hidden, channels], (1.0 / channels as f64).sqrt()),
            b1: b.constant("fc1.bias", vec![hidden], 0.0),
            w2: b.normal("fc2.weight", vec![channels, hidden], (1.0 / hidden as f64).sqrt()),
            b2: b.constant("fc2.bias", vec![channels], 0.0),
            channels,
            hidden,
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, ctx: &mut Ctx<S>, x: &Tensor4<S>) -> Result<(Tensor4<S>, SeCache<S>)> {
        if x.c() != self.channels {
            return shape(format!("SE block expects {} channels, got {:?}", self.channels, x.shape));
        }
        let (n, c, p, h) = (x.n(), self.channels, x.plane(), self.hidden);
        let (w1, b1, w2, b2) = (ps.get(self.w1), ps.get(self.b1), ps.get(self.w2), ps.get(self.b2));
        let inv_p = S::from_usize_lossy(p).recip();
        let mut squeezed = vec![S::zero(); n * c];
        let mut hidden = vec![S::zero(); n * h];
        let mut gates = vec![S::zero(); n * c];
        let mut y = Tensor4::zeros(x.shape);
        for b in 0..n {
            let item = x.item(b);
            let s = &mut squeezed[b * c..(b + 1) * c];
            for ch in 0..c {
                s[ch] = item[ch * p..(ch + 1) * p].iter().copied().sum::<S>() * inv_p;
            }
            let z = &mut hidden[b * h..(b + 1) * h];
            for j in 0..h {
                z[j] = b1[j] + (0..c).map(|ch| w1[j * c + ch] * s[ch]).sum::<S>();
            }
        }
        ctx.relu(&mut hidden);
        for b in 0..n {
            let item = x.item(b);
            let z = &hidden[b * h..(b + 1) * h];
            let g = &mut gates[b * c..(b + 1) * c];
            for ch in 0..c {
                g[ch] = sigmoid(b2[ch] + (0..h).map(|j| w2[ch * h + j] * z[j]).sum::<S>());
            }
            let out = y.item_mut(b);
            for ch in 0..c {
                for i in ch * p..(ch + 1) * p {
                    out[i] = item[i] * g[ch];
                }
            }
        }
        Ok((y, SeCache { x: x.clone(), squeezed, hidden, gates }))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &SeCache<S>,
        dy: &Tensor4<S>,
    ) -> Tensor4<S> {
        let x = &cache.x;
        let (n, c, p, h) = (x.n(), self.channels, x.plane(), self.hidden);
        let (w1, w2) = (ps.get(self.w1), ps.get(self.w2));
        let inv_p = S::from_usize_lossy(p).recip();
        let mut dx = Tensor4::zeros(x.shape);
        let mut dgate_pre = vec![S::zero(); c];
        let mut dz = vec![S::zero(); h];
        for b in 0..n {
            let item = x.item(b);
            let g = &cache.gates[b * c..(b + 1) * c];
            let z = &cache.hidden[b * h..(b + 1) * h];
            let s = &cache.squeezed[b * c..(b + 1) * c];
            let gy = dy.item(b);
            for ch in 0..c {
                let dg: S = (ch * p..(ch + 1) * p).map(|i| gy[i] * item[i]).sum();
                dgate_pre[ch] = dg * g[ch] * (S::one() - g[ch]);
            }
            dz.iter_mut().for_each(|v| *v = S::zero());
            {
                let gw2 = grads.get_mut(self.w2);
                for ch in 0..c {
                    for j in 0..h {
                        gw2[ch * h + j] += dgate_pre[ch] * z[j];
                        dz[j] += w2[ch * h + j] * dgate_pre[ch];
                    }
                }
            }
            let gb2 = grads.get_mut(self.b2);
            for ch in 0..c {
                gb2[ch] += dgate_pre[ch];
            }
            for j in 0..h {
                if z[j] <= S::zero() {
                    dz[j] = S::zero();
                }
            }
            let mut ds = vec![S::zero(); c];
            {
                let gw1 = grads.get_mut(self.w1);
                for j in 0..h {
                    for ch in 0..c {
                        gw1[j * c + ch] += dz[j] * s[ch];
                        ds[ch] += w1[j * c + ch] * dz[j];
                    }
                }
            }
            let gb1 = grads.get_mut(self.b1);
            for j in 0..h {
                gb1[j] += dz[j];
            }
            let out = dx.item_mut(b);
            for ch in 0..c {
                let spread = ds[ch] * inv_p;
                for i in ch * p..(ch + 1) * p {
                    out[i] = gy[i] * g[ch] + spread;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn block(c: usize) -> (ParamStore<f64>, SqueezeExcite) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let se = SqueezeExcite::new(&mut Builder::new(&mut ps, &mut rng), "se", c, 8);
        (ps, se)
    }

    #[test]
    fn saturated_gates_are_identity() {
        let (mut ps, se) = block(16);
        ps.get_mut(se.w2).iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(se.b2).iter_mut().for_each(|v| *v = 50.0);
        let x = Tensor4::from_vec([2, 16, 4, 5], (0..640).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let (y, _) = se.forward(&ps, &mut Ctx::train(), &x).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_gate_range() {
        let (ps, se) = block(16);
        let x = Tensor4::from_vec([2, 16, 32, 40], (0..40960).map(|v| ((v * 13) % 29) as f64 - 14.0).collect()).unwrap();
        let (y, cache) = se.forward(&ps, &mut Ctx::train(), &x).unwrap();
        assert_eq!(y.shape, x.shape);
        assert!(cache.gates.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn equal_channels_give_equal_gates() {
        let (mut ps, se) = block(8);
        // identical rows in fc2 and equal biases make the gate map channel-symmetric
        let w2 = ps.get(se.w2)[..se.hidden].to_vec();
        for ch in 0..8 {
            ps.get_mut(se.w2)[ch * se.hidden..(ch + 1) * se.hidden].copy_from_slice(&w2);
        }
        let plane: Vec<f64> = (0..12).map(|v| v as f64 * 0.1).collect();
        let data: Vec<f64> = (0..8).flat_map(|_| plane.clone()).collect();
        let x = Tensor4::from_vec([1, 8, 3, 4], data).unwrap();
        let (_, cache) = se.forward(&ps, &mut Ctx::train(), &x).unwrap();
        assert!(cache.gates.iter().all(|&g| (g - cache.gates[0]).abs() < 1e-15));
    }
}
