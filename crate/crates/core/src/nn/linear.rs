use super::params::{Builder, Grads, ParamId, ParamStore};
use crate::error::{shape, Result};
use crate::scalar::Scalar;

/// Affine map applied row-wise to a `[batch, in]` matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<S: Scalar>(bld: &mut Builder<S>, name: &str, din: usize, dout: usize) -> Self {
        bld.scoped(name, |bld| Self {
            w: bld.normal("weight", vec![dout, din], (1.0 / din as f64).sqrt()),
            b: bld.constant("bias", vec![dout], 0.0),
            din,
            dout,
        })
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &[S]) -> Result<Vec<S>> {
        if x.len() % self.din != 0 {
            return shape(format!("linear layer expects rows of {}, got {} values", self.din, x.len()));
        }
        let n = x.len() / self.din;
        let bias = ps.get(self.b);
        let mut y: Vec<S> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        // Y[n, out] = X[n, in] * W^T
        S::gemm(n, self.din, self.dout, S::one(), x, self.din as isize, 1, ps.get(self.w), 1, self.din as isize, S::one(), &mut y, self.dout as isize, 1);
        Ok(y)
    }

    pub fn backward<S: Scalar>(&self, ps: &ParamStore<S>, grads: &mut Grads<S>, x: &[S], dy: &[S]) -> Vec<S> {
        let n = x.len() / self.din;
        // dW[out, in] += dY^T X
        S::gemm(self.dout, n, self.din, S::one(), dy, 1, self.dout as isize, x, self.din as isize, 1, S::one(), grads.get_mut(self.w), self.din as isize, 1);
        let gb = grads.get_mut(self.b);
        for row in dy.chunks(self.dout) {
            gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        let mut dx = vec![S::zero(); x.len()];
        S::gemm(n, self.dout, self.din, S::one(), dy, self.dout as isize, 1, ps.get(self.w), self.din as isize, 1, S::zero(), &mut dx, self.din as isize, 1);
        dx
    }
}
