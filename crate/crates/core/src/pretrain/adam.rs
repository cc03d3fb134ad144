use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::transformer::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let zeros: Vec<Vec<T>> = weights
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with `state.step + 1` as the step index.
pub fn adam_step<T: Real>(
    weights: &mut ModelWeights<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::shape("adam", &[weights.len()], &[grads.len(), state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let p = weights.tensor_mut(i).data_mut();
        if g.len() != p.len() {
            return Err(Error::shape("adam gradient", &[p.len()], &[g.len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(x: f64) -> ModelWeights<f64> {
        ModelWeights::from_named(vec![("w".into(), Tensor::from_f64(&[1], &[x]).unwrap())]).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut w = single(0.5);
        let mut s = AdamState::new(&w);
        adam_step(&mut w, &[vec![0.0]], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(w.tensor(0).data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = single(0.0);
        let mut s = AdamState::new(&w);
        adam_step(&mut w, &[vec![0.1]], &mut s, &AdamConfig::default()).unwrap();
        let want = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((w.tensor(0).data()[0] - want).abs() < 1e-15);
        assert!((w.tensor(0).data()[0] + 9.99999e-4).abs() < 1e-9);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn later_steps_follow_moment_recurrence() {
        let cfg = AdamConfig::default();
        let mut w = single(1.0);
        let mut s = AdamState::new(&w);
        let gs = [0.3, -0.2, 0.05];
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        for (k, &g) in gs.iter().enumerate() {
            adam_step(&mut w, &[vec![g]], &mut s, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (k + 1) as i32;
            p -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((w.tensor(0).data()[0] - p).abs() < 1e-15);
    }
}
