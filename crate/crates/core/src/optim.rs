//! Adam over the learnable entries of a [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    /// First and second moments, parallel to the store (empty for running statistics).
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = |p: &crate::nn::Param<S>| if p.learnable() { vec![S::zero(); p.len()] } else { Vec::new() };
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &Grads<S>, lr: f64) -> Result<()> {
        if grads.g.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::c(self.beta1), S::c(self.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let corr1 = S::c(1.0 - self.beta1.powi(t));
        let corr2 = S::c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (S::c(lr), S::c(self.eps));
        for (k, p) in params.iter_mut().enumerate() {
            if !p.learnable() {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.g[k]);
            for i in 0..p.value.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn store() -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.add("w", vec![3], vec![0.5, -1.0, 2.0], ParamKind::Learnable);
        ps.add("stat", vec![1], vec![7.0], ParamKind::RunningStat);
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = store();
        let before = ps.clone();
        let mut adam = Adam::new(&ps);
        let zero = ps.zero_grads();
        for _ in 0..5 {
            adam.update(&mut ps, &zero, 1e-3).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut ps = store();
        let mut adam = Adam::new(&ps);
        let mut g = ps.zero_grads();
        g.g[0] = vec![3.0, -0.2, 0.0];
        g.g[1] = vec![100.0];
        adam.update(&mut ps, &g, 0.01).unwrap();
        let w = ps.get(ps.id("w").unwrap());
        assert!((w[0] - (0.5 - 0.01)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 0.01)).abs() < 1e-9);
        assert_eq!(w[2], 2.0);
        assert_eq!(ps.get(ps.id("stat").unwrap())[0], 7.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", vec![2], vec![3.0, -4.0], ParamKind::Learnable);
        let mut adam = Adam::new(&ps);
        for _ in 0..3000 {
            let mut g = ps.zero_grads();
            g.g[0] = ps.get(id).iter().map(|v| 2.0 * v).collect();
            adam.update(&mut ps, &g, 0.01).unwrap();
        }
        assert!(ps.get(id).iter().all(|v: &f64| v.abs() < 1e-2));
    }
}
