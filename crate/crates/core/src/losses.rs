//! Speaker-classification, reconstruction and embedding-enhancement losses,
//! each returned together with its gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg, shape, Error, Result};
use crate::model::Mode;
use crate::nn::Tensor4;
use crate::scalar::Scalar;

pub const COS_EPS: f64 = 1e-8;

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (`[items, classes]`), and its gradient.
pub fn cce_loss<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> Result<(S, Vec<S>)> {
    if classes == 0 || logits.len() != labels.len() * classes || labels.is_empty() {
        return shape(format!("{} logits do not form {} rows of {classes}", logits.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return arg(format!("label {bad} out of range for {classes} classes"));
    }
    let inv_n = S::from_usize_lossy(labels.len()).recip();
    let mut total = S::zero();
    let mut grad = vec![S::zero(); logits.len()];
    for (i, (row, &label)) in logits.chunks(classes).zip(labels).enumerate() {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let z: S = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        total += log_z - row[label];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (k, (gk, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            *gk = (p - if k == label { S::one() } else { S::zero() }) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseNorm {
    /// Mean over elements, then over items.
    #[default]
    PerElement,
    /// Summed squared norm per item, averaged over items.
    Literal,
}

/// Reconstruction loss of the clean view `o` against `clean1` and of the
/// noisy view `o_noisy` against the clean version `clean2` of its input.
/// Returns the value and the gradients for `o` and `o_noisy`.
pub fn mse_fe_loss<S: Scalar>(
    o: &Tensor4<S>,
    o_noisy: &Tensor4<S>,
    clean1: &Tensor4<S>,
    clean2: &Tensor4<S>,
    norm: MseNorm,
) -> Result<(S, Tensor4<S>, Tensor4<S>)> {
    if o.shape != clean1.shape || o_noisy.shape != clean2.shape || o.shape != o_noisy.shape {
        return shape(format!(
            "reconstruction shapes {:?}/{:?} do not match targets {:?}/{:?}",
            o.shape, o_noisy.shape, clean1.shape, clean2.shape
        ));
    }
    let items = 2 * o.n();
    let per_item = match norm {
        MseNorm::PerElement => o.item_len(),
        MseNorm::Literal => 1,
    };
    let scale = S::from_usize_lossy(items * per_item).recip();
    let two = S::c(2.0);
    let mut total = S::zero();
    let mut grads = Vec::with_capacity(2);
    for (out, target) in [(o, clean1), (o_noisy, clean2)] {
        let mut g = Tensor4::zeros(out.shape);
        for ((gv, &a), &b) in g.data.iter_mut().zip(&out.data).zip(&target.data) {
            let d = a - b;
            total += d * d;
            *gv = two * d * scale;
        }
        grads.push(g);
    }
    let g_noisy = grads.pop().expect("two gradients");
    let g_clean = grads.pop().expect("two gradients");
    Ok((total * scale, g_clean, g_noisy))
}

fn norms<S: Scalar>(rows: &[S], dim: usize) -> Vec<S> {
    let eps = S::c(COS_EPS);
    rows.chunks(dim).map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps)).collect()
}

fn cosines<S: Scalar>(clean: &[S], noisy: &[S], dim: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = clean.len() / dim;
    let (nc, nn) = (norms(clean, dim), norms(noisy, dim));
    let mut cos = vec![S::zero(); n * n];
    for i in 0..n {
        let a = &clean[i * dim..(i + 1) * dim];
        for j in 0..n {
            let b = &noisy[j * dim..(j + 1) * dim];
            let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            cos[i * n + j] = dot / (nc[i] * nn[j]);
        }
    }
    (cos, nc, nn)
}

fn check_pairs<S>(clean: &[S], noisy: &[S], dim: usize) -> Result<usize> {
    if dim == 0 || clean.is_empty() || clean.len() != noisy.len() || clean.len() % dim != 0 {
        return shape(format!("embedding sets of {} and {} values do not pair up in rows of {dim}", clean.len(), noisy.len()));
    }
    Ok(clean.len() / dim)
}

/// `T[i][j] = w * cos(clean_i, noisy_j) + b`, row-major `n x n`.
pub fn apn_similarity<S: Scalar>(clean: &[S], noisy: &[S], dim: usize, w: S, b: S) -> Result<Vec<S>> {
    check_pairs(clean, noisy, dim)?;
    let (cos, _, _) = cosines(clean, noisy, dim);
    Ok(cos.into_iter().map(|c| w * c + b).collect())
}

fn sqrt_len(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n == 0 || n * n != len {
        return Err(Error::Shape(format!("similarity matrix with {len} entries is not square")));
    }
    Ok(n)
}

/// Column-wise softmax cross-entropy with the diagonal as the positive:
/// `-(1/n) sum_j log(exp T[j][j] / sum_i exp T[i][j])`. Returns value and `dL/dT`.
pub fn apn_loss_grad<S: Scalar>(t: &[S]) -> Result<(S, Vec<S>)> {
    let n = sqrt_len(t.len())?;
    let inv_n = S::from_usize_lossy(n).recip();
    let mut total = S::zero();
    let mut grad = vec![S::zero(); t.len()];
    for j in 0..n {
        let m = (0..n).map(|i| t[i * n + j]).fold(S::neg_infinity(), S::max);
        let z: S = (0..n).map(|i| (t[i * n + j] - m).exp()).sum();
        let log_z = z.ln() + m;
        total += log_z - t[j * n + j];
        for i in 0..n {
            let p = (t[i * n + j] - log_z).exp();
            grad[i * n + j] = (p - if i == j { S::one() } else { S::zero() }) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

pub fn apn_loss<S: Scalar>(t: &[S]) -> Result<S> {
    apn_loss_grad(t).map(|(v, _)| v)
}

/// Value and gradients of the angular prototypical objective.
#[derive(Debug, Clone)]
pub struct ApnTerm<S> {
    pub value: S,
    pub d_clean: Vec<S>,
    pub d_noisy: Vec<S>,
    pub d_w: S,
    pub d_b: S,
}

pub fn apn_objective<S: Scalar>(clean: &[S], noisy: &[S], dim: usize, w: S, b: S) -> Result<ApnTerm<S>> {
    let n = check_pairs(clean, noisy, dim)?;
    let (cos, nc, nn) = cosines(clean, noisy, dim);
    let t: Vec<S> = cos.iter().map(|&c| w * c + b).collect();
    let (value, dt) = apn_loss_grad(&t)?;
    let d_w = dt.iter().zip(&cos).map(|(&g, &c)| g * c).sum();
    let d_b = dt.iter().copied().sum();
    let mut d_clean = vec![S::zero(); clean.len()];
    let mut d_noisy = vec![S::zero(); noisy.len()];
    for i in 0..n {
        let a = &clean[i * dim..(i + 1) * dim];
        for j in 0..n {
            let g = dt[i * n + j] * w;
            if g == S::zero() {
                continue;
            }
            let bv = &noisy[j * dim..(j + 1) * dim];
            let c = cos[i * n + j];
            // d cos / d a = (b/|b| - cos a/|a|) / |a|
            for k in 0..dim {
                d_clean[i * dim + k] += g * (bv[k] / nn[j] - c * a[k] / nc[i]) / nc[i];
                d_noisy[j * dim + k] += g * (a[k] / nc[i] - c * bv[k] / nn[j]) / nn[j];
            }
        }
    }
    Ok(ApnTerm { value, d_clean, d_noisy, d_w, d_b })
}

/// Mean squared difference between paired embeddings, with gradients.
pub fn embedding_mse<S: Scalar>(clean: &[S], noisy: &[S], dim: usize) -> Result<(S, Vec<S>, Vec<S>)> {
    check_pairs(clean, noisy, dim)?;
    let scale = S::from_usize_lossy(clean.len()).recip();
    let two = S::c(2.0);
    let mut total = S::zero();
    let mut dc = vec![S::zero(); clean.len()];
    let mut dn = vec![S::zero(); noisy.len()];
    for k in 0..clean.len() {
        let d = clean[k] - noisy[k];
        total += d * d;
        dc[k] = two * d * scale;
        dn[k] = -two * d * scale;
    }
    Ok((total * scale, dc, dn))
}

/// Which embedding-enhancement criterion pulls clean and noisy embeddings together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingTerm {
    None,
    #[default]
    Apn,
    Mse,
}

impl FromStr for EmbeddingTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "apn" => Ok(Self::Apn),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown embedding term `{other}`"))),
        }
    }
}

impl fmt::Display for EmbeddingTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Apn => "apn",
            Self::Mse => "mse",
        })
    }
}

/// Which terms are trained and how they are weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Speaker classification.
    pub sid: bool,
    /// Spectrogram reconstruction (modes with a decoder).
    pub fe: bool,
    /// Embedding enhancement (extended U-Net only).
    pub ee: EmbeddingTerm,
    pub mse_norm: MseNorm,
    pub w_cce: f64,
    pub w_mse: f64,
    pub w_ee: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { sid: true, fe: true, ee: EmbeddingTerm::Apn, mse_norm: MseNorm::PerElement, w_cce: 1.0, w_mse: 1.0, w_ee: 1.0 }
    }
}

/// Which terms contribute to the total for a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub cce: bool,
    pub mse: bool,
    pub ee: EmbeddingTerm,
}

impl LossConfig {
    pub fn active(&self, mode: Mode) -> ActiveTerms {
        ActiveTerms {
            cce: self.sid,
            mse: self.fe && mode.has_decoder(),
            ee: if mode == Mode::Exunet { self.ee } else { EmbeddingTerm::None },
        }
    }
}

/// Per-step loss components; inactive parts are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub cce: f64,
    pub mse: f64,
    /// The embedding-enhancement term, whichever criterion is selected.
    pub apn: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.cce.is_finite() && self.mse.is_finite() && self.apn.is_finite() && self.total.is_finite()
    }
}

/// Available loss components before the mode decides which count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cce: Option<f64>,
    pub mse: Option<f64>,
    pub apn: Option<f64>,
}

/// Unweighted sum of the terms of `mode`: classification alone, plus
/// reconstruction for the U-Net, plus embedding enhancement for the extended U-Net.
pub fn total_loss(mode: Mode, parts: LossParts) -> Result<LossBundle> {
    total_loss_with(mode, parts, &LossConfig::default())
}

pub fn total_loss_with(mode: Mode, parts: LossParts, cfg: &LossConfig) -> Result<LossBundle> {
    let active = cfg.active(mode);
    let take = |on: bool, part: Option<f64>, name: &str| -> Result<f64> {
        match (on, part) {
            (true, Some(v)) => Ok(v),
            (true, None) => Err(Error::Argument(format!("{mode} objective needs the {name} term"))),
            (false, _) => Ok(0.0),
        }
    };
    let cce = take(active.cce, parts.cce, "classification")?;
    let mse = take(active.mse, parts.mse, "reconstruction")?;
    let apn = take(active.ee != EmbeddingTerm::None, parts.apn, "embedding-enhancement")?;
    Ok(LossBundle { cce, mse, apn, total: cfg.w_cce * cce + cfg.w_mse * mse + cfg.w_ee * apn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central differences of a scalar function of a vector.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-4;
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                p[k] += h;
                let up = f(&p);
                p[k] -= 2.0 * h;
                (up - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grads(ana: &[f64], num: &[f64]) {
        for (a, n) in ana.iter().zip(num) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel <= 1e-5 || (a - n).abs() < 1e-10, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn cce_uniform_logits_give_log_k() {
        let (v, _) = cce_loss(&[0.3f64; 12], 4, &[0, 1, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_saturates() {
        let (v, _) = cce_loss(&[30.0f64, 0.0, 0.0], 3, &[0]).unwrap();
        assert!((0.0..=1e-9).contains(&v));
    }

    #[test]
    fn cce_hand_example() {
        let (v, _) = cce_loss(&[1.0f64, 0.0, 0.0, 0.0, 2.0, 0.0], 3, &[0, 1]).unwrap();
        let a = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        let b = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert!((v - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cce_rejects_bad_labels() {
        assert!(matches!(cce_loss(&[0.0f64; 6], 3, &[0, 3]), Err(Error::Argument(_))));
        assert!(matches!(cce_loss(&[0.0f64; 5], 3, &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn cce_gradient() {
        let logits = [0.2, -1.3, 0.8, 2.1, 0.0, -0.4, 1.1, 0.9];
        let labels = [3, 1];
        let (_, g) = cce_loss(&logits, 4, &labels).unwrap();
        assert_grads(&g, &numeric_grad(&logits, |x| cce_loss(x, 4, &labels).unwrap().0));
    }

    fn t4(n: usize, f: impl Fn(usize) -> f64) -> Tensor4<f64> {
        Tensor4::from_vec([n, 1, 2, 2], (0..n * 4).map(f).collect()).unwrap()
    }

    #[test]
    fn mse_identity_is_zero() {
        let a = t4(2, |i| i as f64 * 0.3);
        let b = t4(2, |i| 1.0 - i as f64);
        let (v, _, _) = mse_fe_loss(&a, &b, &a, &b, MseNorm::PerElement).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mse_constant_offset() {
        let c = 0.7;
        let target = t4(3, |i| (i as f64).sin());
        let shifted = t4(3, |i| (i as f64).sin() + c);
        let (v, _, _) = mse_fe_loss(&shifted, &target, &target, &target, MseNorm::PerElement).unwrap();
        assert!((v - c * c / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_double_loop() {
        let (o, on) = (t4(2, |i| (i as f64 * 1.7).cos()), t4(2, |i| (i as f64 * 0.4).sin()));
        let (c1, c2) = (t4(2, |i| i as f64 * 0.1), t4(2, |i| 0.5 - i as f64 * 0.05));
        let mut sum = 0.0;
        for (a, b) in [(&o, &c1), (&on, &c2)] {
            for item in 0..2 {
                for k in 0..4 {
                    let d = a.item(item)[k] - b.item(item)[k];
                    sum += d * d;
                }
            }
        }
        let (v, _, _) = mse_fe_loss(&o, &on, &c1, &c2, MseNorm::PerElement).unwrap();
        assert!((v - sum / 16.0).abs() < 1e-14);
        let (lit, _, _) = mse_fe_loss(&o, &on, &c1, &c2, MseNorm::Literal).unwrap();
        assert!((lit - sum / 4.0).abs() < 1e-14);
    }

    #[test]
    fn mse_gradient() {
        let (o, on) = (t4(2, |i| (i as f64 * 1.7).cos()), t4(2, |i| (i as f64 * 0.4).sin()));
        let (c1, c2) = (t4(2, |i| i as f64 * 0.1), t4(2, |i| 0.5 - i as f64 * 0.05));
        let (_, go, gon) = mse_fe_loss(&o, &on, &c1, &c2, MseNorm::PerElement).unwrap();
        let num = numeric_grad(&o.data, |x| {
            mse_fe_loss(&Tensor4::from_vec(o.shape, x.to_vec()).unwrap(), &on, &c1, &c2, MseNorm::PerElement).unwrap().0
        });
        assert_grads(&go.data, &num);
        let num = numeric_grad(&on.data, |x| {
            mse_fe_loss(&o, &Tensor4::from_vec(on.shape, x.to_vec()).unwrap(), &c1, &c2, MseNorm::PerElement).unwrap().0
        });
        assert_grads(&gon.data, &num);
        assert!(matches!(mse_fe_loss(&o, &t4(3, |_| 0.0), &c1, &c2, MseNorm::PerElement), Err(Error::Shape(_))));
    }

    #[test]
    fn similarity_of_orthonormal_rows_is_identity() {
        let e = [1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = apn_similarity(&e, &e, 3, 1.0, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((t[i * 3 + j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let u = [0.6f64, 0.8];
        assert!((apn_similarity(&u, &u, 2, 10.0, -5.0).unwrap()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn apn_identities() {
        assert_eq!(apn_loss(&[3.7f64]).unwrap(), 0.0);
        assert!((apn_loss(&[0.4f64; 16]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let v = apn_loss(&[2.0f64, 0.0, 0.0, 2.0]).unwrap();
        let direct = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((v - direct).abs() < 1e-15);
        assert!(matches!(apn_loss(&[0.0f64; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn apn_decreases_as_the_diagonal_grows() {
        let mut last = f64::INFINITY;
        for d in 0..20 {
            let mut t = vec![0.5f64; 9];
            for i in 0..3 {
                t[i * 4] = d as f64;
            }
            let v = apn_loss(&t).unwrap();
            assert!(v < last && v >= 0.0);
            last = v;
        }
    }

    #[test]
    fn apn_objective_gradient() {
        let clean = [0.3, -1.2, 0.5, 0.9, 0.1, -0.7, 1.4, 0.2, -0.3, 0.8, 0.6, -1.1];
        let noisy = [0.1, -0.9, 0.7, 1.2, 0.4, -0.2, 0.3, 0.6, -0.8, 0.2, 1.0, -0.4];
        let (w, b) = (10.0, -5.0);
        let term = apn_objective(&clean, &noisy, 4, w, b).unwrap();
        let f = |c: &[f64], n: &[f64], w: f64, b: f64| apn_loss(&apn_similarity(c, n, 4, w, b).unwrap()).unwrap();
        assert!((term.value - f(&clean, &noisy, w, b)).abs() < 1e-14);
        assert_grads(&term.d_clean, &numeric_grad(&clean, |x| f(x, &noisy, w, b)));
        assert_grads(&term.d_noisy, &numeric_grad(&noisy, |x| f(&clean, x, w, b)));
        assert_grads(&[term.d_w, term.d_b], &numeric_grad(&[w, b], |p| f(&clean, &noisy, p[0], p[1])));
    }

    #[test]
    fn single_pair_apn_has_no_scalar_gradient() {
        let term = apn_objective(&[0.3, 0.4], &[1.0, -2.0], 2, 10.0, -5.0).unwrap();
        assert_eq!(term.value, 0.0);
        assert_eq!((term.d_w, term.d_b), (0.0, 0.0));
    }

    #[test]
    fn embedding_mse_gradient() {
        let (c, n) = ([0.1, 0.5, -0.3, 0.9], [0.4, 0.2, 0.0, -0.1]);
        let (v, dc, dn) = embedding_mse(&c, &n, 2).unwrap();
        assert!((v - (0.09 + 0.09 + 0.09 + 1.0) / 4.0f64).abs() < 1e-15);
        assert_grads(&dc, &numeric_grad(&c, |x| embedding_mse(x, &n, 2).unwrap().0));
        assert_grads(&dn, &numeric_grad(&n, |x| embedding_mse(&c, x, 2).unwrap().0));
    }

    #[test]
    fn totals_per_mode() {
        let parts = LossParts { cce: Some(1.0), mse: Some(0.5), apn: Some(0.25) };
        assert_eq!(total_loss(Mode::Exunet, parts).unwrap().total, 1.75);
        assert_eq!(total_loss(Mode::Unet, parts).unwrap().total, 1.5);
        assert_eq!(total_loss(Mode::Baseline, parts).unwrap().total, 1.0);
        let missing = LossParts { apn: None, ..parts };
        assert!(matches!(total_loss(Mode::Exunet, missing), Err(Error::Argument(_))));
        assert_eq!(total_loss(Mode::Unet, missing).unwrap().apn, 0.0);
    }

    #[test]
    fn ablation_switches_reach_each_system() {
        let parts = LossParts { cce: Some(1.0), mse: Some(0.5), apn: Some(0.25) };
        let cases = [
            (LossConfig { sid: false, ..Default::default() }, 0.75),
            (LossConfig { fe: false, ..Default::default() }, 1.25),
            (LossConfig { ee: EmbeddingTerm::None, ..Default::default() }, 1.5),
            (LossConfig { ee: EmbeddingTerm::Mse, ..Default::default() }, 1.75),
            (LossConfig::default(), 1.75),
        ];
        for (cfg, want) in cases {
            assert_eq!(total_loss_with(Mode::Exunet, parts, &cfg).unwrap().total, want, "{cfg:?}");
        }
    }

    proptest! {
        #[test]
        fn cce_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 10), shift in -50.0f64..50.0, label in 0usize..5) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let (a, _) = cce_loss(&logits, 5, &[label, (label + 2) % 5]).unwrap();
            let (b, _) = cce_loss(&shifted, 5, &[label, (label + 2) % 5]).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn apn_ignores_row_scaling(
            clean in prop::collection::vec(-2.0f64..2.0, 12),
            noisy in prop::collection::vec(-2.0f64..2.0, 12),
            scale in 0.01f64..100.0,
            row in 0usize..3,
        ) {
            prop_assume!(clean.chunks(4).chain(noisy.chunks(4)).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            let mut scaled = clean.clone();
            scaled[row * 4..(row + 1) * 4].iter_mut().for_each(|v| *v *= scale);
            let a = apn_similarity(&clean, &noisy, 4, 10.0, -5.0).unwrap();
            let b = apn_similarity(&scaled, &noisy, 4, 10.0, -5.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(close(*x, *y, 1e-12));
            }
            prop_assert!(close(apn_loss(&a).unwrap(), apn_loss(&b).unwrap(), 1e-12));
            prop_assert!(apn_loss(&a).unwrap() >= 0.0);
        }
    }
}
