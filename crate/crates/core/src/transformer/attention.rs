use super::batch::AttnMask;
use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights `[b, tq, tk]`.
    pub weights: Var,
}

/// `softmax(Q·Kᵀ/√d_k + mask)·V` for `Q [b, tq, d_k]`, `K [b, tk, d_k]`,
/// `V [b, tk, d_v]`. Disallowed logits are shifted by −1e9.
pub fn scaled_dot_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttnMask,
) -> Result<AttentionOutput> {
    let (sq, sk) = (g.value(q).shape().to_vec(), g.value(k).shape().to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[2] != sk[2] || sq[0] != sk[0] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    if [mask.b, mask.tq, mask.tk] != [sq[0], sq[1], sk[1]] {
        return Err(Error::shape("attention mask", &[mask.b, mask.tq, mask.tk], &sq));
    }
    if let Some((b, row)) = mask.empty_row() {
        return Err(Error::Numeric(format!(
            "attention row {row} of batch item {b} has no attendable position"
        )));
    }
    let m = g.constant(mask.additive());
    attend(g, q, k, v, m)
}

/// Unchecked core of [`scaled_dot_attention`] taking a prepared additive mask.
pub(crate) fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    additive_mask: Var,
) -> Result<AttentionOutput> {
    let d_k = *g.value(q).shape().last().unwrap();
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / T::lit(d_k as f64).sqrt())?;
    let logits = g.add(logits, additive_mask)?;
    let weights = g.softmax(logits, 2)?;
    let out = g.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights })
}
