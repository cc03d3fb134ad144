use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::transformer::{MaskPlan, Predictions, SeqBatch};

/// Positions that contribute to the reconstruction loss.
pub fn loss_positions(batch: &SeqBatch, plan: &MaskPlan, masked_only: bool) -> Vec<bool> {
    batch
        .real
        .iter()
        .zip(&plan.marked)
        .map(|(&r, &m)| r && (!masked_only || m))
        .collect()
}

/// `Σ_pos [Σ_numeric (pred − target)² + Σ_categorical CE] / normalizer` over
/// the included positions of `original`.
///
/// `normalizer` is the number of included positions in the full batch, so
/// shard losses computed with the same normalizer add up to the batch loss.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &Predictions,
    original: &SeqBatch,
    plan: &MaskPlan,
    masked_only: bool,
    normalizer: usize,
) -> Result<Var> {
    if preds.numeric.len() != original.n_num || preds.categorical.len() != original.n_cat {
        return Err(Error::shape(
            "reconstruction heads",
            &[preds.numeric.len(), preds.categorical.len()],
            &[original.n_num, original.n_cat],
        ));
    }
    let include = loss_positions(original, plan, masked_only);
    let w = if normalizer == 0 {
        T::zero()
    } else {
        T::one() / T::lit(normalizer as f64)
    };
    let weight: Vec<T> = include.iter().map(|&i| if i { w } else { T::zero() }).collect();

    let mut terms = Vec::with_capacity(preds.numeric.len() + preds.categorical.len());
    for (c, &p) in preds.numeric.iter().enumerate() {
        let target: Vec<T> = original.numeric_of(c).into_iter().map(T::lit).collect();
        let term = g.squared_error(p, &target, &weight).map_err(|e| head_error(e, "numeric", c))?;
        terms.push(term);
    }
    for (c, &logits) in preds.categorical.iter().enumerate() {
        let target: Vec<usize> = original.codes_of(c).into_iter().map(|x| x as usize).collect();
        let term = g
            .cross_entropy(logits, &target, &weight)
            .map_err(|e| head_error(e, "categorical", c))?;
        terms.push(term);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Err(Error::Config("model has no reconstruction heads".into())),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

fn head_error(e: Error, kind: &str, c: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{kind} head {c}: {msg}")),
        other => other,
    }
}
