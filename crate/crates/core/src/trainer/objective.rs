use crate::error::{Error, Result};
use crate::losses::{apn_objective, cce_loss, embedding_mse, mse_fe_loss, total_loss_with, EmbeddingTerm, LossBundle, LossConfig, LossParts};
use crate::model::{Model, OutputGrads};
use crate::nn::{Ctx, Grads, Tensor4};
use crate::scalar::Scalar;

/// Total loss of a paired batch and its parameter gradient.
///
/// `inputs` holds the `n` clean items followed by the `n` noisy ones;
/// `targets` the clean spectrograms the reconstructions are compared with.
pub fn objective<S: Scalar>(
    model: &Model<S>,
    ctx: &mut Ctx<S>,
    inputs: &Tensor4<S>,
    targets: &Tensor4<S>,
    labels: &[usize],
    loss: &LossConfig,
) -> Result<(LossBundle, Grads<S>)> {
    let items = inputs.n();
    if items == 0 || items % 2 != 0 || targets.shape != inputs.shape || labels.len() != items {
        return Err(Error::Shape(format!(
            "paired batch needs 2n inputs, targets and labels; got {:?}, {:?} and {} labels",
            inputs.shape,
            targets.shape,
            labels.len()
        )));
    }
    let n = items / 2;
    let active = loss.active(model.cfg.mode);
    let out = model.forward(ctx, inputs)?;
    let mut parts = LossParts::default();
    let mut og = OutputGrads::default();
    let w = |v: f64| S::c(v);

    if active.cce {
        let (v, g) = cce_loss(&out.logits, model.cfg.n_speakers, labels)?;
        parts.cce = Some(v.to_f64().unwrap_or(f64::NAN));
        og.logits = Some(g.into_iter().map(|x| x * w(loss.w_cce)).collect());
    }
    if active.mse {
        let o = out.enhanced.as_ref().ok_or_else(|| Error::MissingParam("dec".into()))?;
        let (v, d_o, d_on) = mse_fe_loss(
            &o.slice_batch(0, n),
            &o.slice_batch(n, items),
            &targets.slice_batch(0, n),
            &targets.slice_batch(n, items),
            loss.mse_norm,
        )?;
        parts.mse = Some(v.to_f64().unwrap_or(f64::NAN));
        let mut d = Tensor4::concat_batch(&d_o, &d_on)?;
        d.data.iter_mut().for_each(|x| *x *= w(loss.w_mse));
        og.enhanced = Some(d);
    }
    let dim = model.cfg.emb_dim;
    let (clean, noisy) = out.embeddings.split_at(n * dim);
    let mut apn_grads = None;
    match active.ee {
        EmbeddingTerm::None => {}
        EmbeddingTerm::Apn => {
            let (aw, ab) = model.apn_scalars().ok_or_else(|| Error::MissingParam("apn".into()))?;
            let t = apn_objective(clean, noisy, dim, aw, ab)?;
            parts.apn = Some(t.value.to_f64().unwrap_or(f64::NAN));
            og.embeddings = Some(t.d_clean.iter().chain(&t.d_noisy).map(|&x| x * w(loss.w_ee)).collect());
            apn_grads = Some((t.d_w * w(loss.w_ee), t.d_b * w(loss.w_ee)));
        }
        EmbeddingTerm::Mse => {
            let (v, dc, dn) = embedding_mse(clean, noisy, dim)?;
            parts.apn = Some(v.to_f64().unwrap_or(f64::NAN));
            og.embeddings = Some(dc.iter().chain(&dn).map(|&x| x * w(loss.w_ee)).collect());
        }
    }
    let bundle = total_loss_with(model.cfg.mode, parts, loss)?;
    let mut grads = model.backward(&out, &og)?;
    if let (Some((dw, db)), Some(apn)) = (apn_grads, model.arch.apn) {
        grads.get_mut(apn.w)[0] += dw;
        grads.get_mut(apn.b)[0] += db;
    }
    Ok((bundle, grads))
}
