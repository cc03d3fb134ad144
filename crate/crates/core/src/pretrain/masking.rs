use rand::seq::index::sample;
use rand::Rng;

use crate::transformer::{MaskMode, MaskPlan, SeqBatch};

/// Selects positions to hide from the model. Pad positions are never marked;
/// a sequence with at least one real step always gets at least one mark when
/// `mask_p > 0`.
pub fn mask_plan<R: Rng>(batch: &SeqBatch, mask_p: f64, mode: MaskMode, rng: &mut R) -> MaskPlan {
    let (b, t) = (batch.b, batch.t);
    let mut plan = MaskPlan::none(b, t);
    if mask_p <= 0.0 {
        return plan;
    }
    for bi in 0..b {
        let real: Vec<usize> = (bi * t..(bi + 1) * t).filter(|&p| batch.real[p]).collect();
        if real.is_empty() {
            continue;
        }
        match mode {
            MaskMode::Bernoulli => {
                let mut any = false;
                for &p in &real {
                    if rng.random::<f64>() < mask_p {
                        plan.marked[p] = true;
                        any = true;
                    }
                }
                if !any {
                    plan.marked[real[rng.random_range(0..real.len())]] = true;
                }
            }
            MaskMode::Exact => {
                let k = ((mask_p * real.len() as f64).round() as usize).clamp(1, real.len());
                for i in sample(rng, real.len(), k) {
                    plan.marked[real[i]] = true;
                }
            }
        }
    }
    plan
}

/// Draws a plan and returns a copy of `batch` with the marked steps zeroed.
pub fn apply_mask<R: Rng>(
    batch: &SeqBatch,
    mask_p: f64,
    mode: MaskMode,
    rng: &mut R,
) -> (SeqBatch, MaskPlan) {
    let plan = mask_plan(batch, mask_p, mode, rng);
    let mut masked = batch.clone();
    let (nn, nc) = (batch.n_num, batch.n_cat);
    for (p, _) in plan.marked.iter().enumerate().filter(|(_, &m)| m) {
        masked.numeric[p * nn..(p + 1) * nn].fill(0.0);
        masked.codes[p * nc..(p + 1) * nc].fill(0);
    }
    (masked, plan)
}
