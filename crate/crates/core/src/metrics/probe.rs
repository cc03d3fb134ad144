use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::MetricsReport;
use super::scores::{auroc, f1_positive, rmse};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Regression,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "regression" => Ok(Task::Regression),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Feature vectors aligned with labels (0/1 for binary tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub entities: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl LabeledSet {
    pub fn new(entities: Vec<String>, features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if entities.len() != features.len() || features.len() != labels.len() {
            return Err(Error::shape(
                "labeled set",
                &[entities.len(), features.len()],
                &[labels.len()],
            ));
        }
        let d = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::SchemaMismatch("feature rows have different widths".into()));
        }
        if features.iter().flatten().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature or label".into()));
        }
        Ok(Self {
            entities,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            entities: idx.iter().map(|&i| self.entities[i].clone()).collect(),
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn binary_labels(&self) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .map(|&l| match l {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::Label(format!("binary label must be 0 or 1, got {other}"))),
            })
            .collect()
    }

    /// Seeded split keeping `train_share` of each class (of everything, for
    /// regression) in the training part.
    pub fn split(&self, train_share: f64, task: Task, seed: u64) -> (LabeledSet, LabeledSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<Vec<usize>> = match task {
            Task::Binary => [0.0, 1.0]
                .iter()
                .map(|&c| (0..self.len()).filter(|&i| self.labels[i] == c).collect())
                .collect(),
            Task::Regression => vec![(0..self.len()).collect()],
        };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for mut g in groups {
            g.shuffle(&mut rng);
            let k = ((g.len() as f64) * train_share).round() as usize;
            train.extend_from_slice(&g[..k]);
            test.extend_from_slice(&g[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }
}

pub const L2: f64 = 1e-4;
const MAX_ITER: usize = 5000;

/// Logistic or least-squares linear model on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub task: Task,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

fn standardize(rows: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    rows.iter()
        .flat_map(|r| r.iter().zip(mean.iter().zip(scale)).map(|(x, (m, s))| (x - m) / s))
        .collect()
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean loss plus `L2·‖w‖²`, with step
    /// size 1/L from the largest Hessian-bound eigenvalue.
    pub fn train(set: &LabeledSet, task: Task, seed: u64) -> Result<Self> {
        let (n, d) = (set.len(), set.dim());
        if n < 2 {
            return Err(Error::Label("probe needs at least 2 examples".into()));
        }
        if task == Task::Binary {
            let y = set.binary_labels()?;
            if y.iter().all(|&l| l == y[0]) {
                return Err(Error::Label("binary probe needs both classes".into()));
            }
        }
        let nf = n as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| set.features.iter().map(|r| r[j]).sum::<f64>() / nf)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = set.features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / nf;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = standardize(&set.features, &mean, &scale);

        // Lipschitz bound of the gradient over (w, b)
        let aug = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i * d + j] } else { 1.0 });
        let gram = aug.transpose() * &aug / nf;
        let top = SymmetricEigen::new(gram).eigenvalues.max();
        let curvature = match task {
            Task::Binary => 0.25 * top,
            Task::Regression => 2.0 * top,
        };
        let lr = 1.0 / (curvature + 2.0 * L2);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let mut b = 0.0;
        let xt = Tensor::new(&[n, d], x)?;
        let weight = vec![1.0 / nf; n];
        let mut iterations = 0;
        for it in 0..MAX_ITER {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(xt.clone());
            let wv = g.param(Tensor::new(&[d, 1], w.clone())?);
            let bv = g.param(Tensor::new(&[1], vec![b])?);
            let z = g.matmul(xv, wv)?;
            let z = g.add_bias(z, bv)?;
            let data_loss = match task {
                Task::Binary => g.bce_with_logits(z, &set.labels, &weight)?,
                Task::Regression => g.squared_error(z, &set.labels, &weight)?,
            };
            let sq = g.mul(wv, wv)?;
            let pen = g.sum(sq)?;
            let pen = g.scale(pen, L2)?;
            let loss = g.add(data_loss, pen)?;
            g.backward(loss)?;
            let gw = g.grad(wv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d]);
            let gb = g.grad(bv).map_or(0.0, |s| s[0]);
            let gmax = gw.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
            iterations = it + 1;
            if !gmax.is_finite() {
                return Err(Error::Numeric("probe gradient is not finite".into()));
            }
            if gmax < 1e-10 {
                break;
            }
            for (wj, gj) in w.iter_mut().zip(&gw) {
                *wj -= lr * gj;
            }
            b -= lr * gb;
        }
        Ok(Self {
            task,
            mean,
            scale,
            weights: w,
            bias: b,
            iterations,
        })
    }

    /// Probabilities for binary probes, values for regression probes.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.weights.len();
        features
            .iter()
            .map(|row| {
                if row.len() != d {
                    return Err(Error::SchemaMismatch(format!(
                        "probe expects {d} features, got {}",
                        row.len()
                    )));
                }
                let z: f64 = self.bias
                    + row
                        .iter()
                        .enumerate()
                        .map(|(j, x)| self.weights[j] * (x - self.mean[j]) / self.scale[j])
                        .sum::<f64>();
                Ok(match self.task {
                    Task::Binary => 1.0 / (1.0 + (-z).exp()),
                    Task::Regression => z,
                })
            })
            .collect()
    }

    /// Weights and intercept on the original feature scale.
    pub fn coefficients(&self) -> (Vec<f64>, f64) {
        let w: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.scale)
            .map(|(w, s)| w / s)
            .collect();
        let b = self.bias - w.iter().zip(&self.mean).map(|(w, m)| w * m).sum::<f64>();
        (w, b)
    }
}

/// Fits a probe on a seeded 70/30 split and scores the held-out part.
pub fn evaluate(set: &LabeledSet, task: Task, seed: u64) -> Result<MetricsReport> {
    let (train, test) = set.split(0.7, task, seed);
    if test.is_empty() {
        return Err(Error::Label("too few examples for a held-out split".into()));
    }
    let probe = LinearProbe::train(&train, task, seed)?;
    let pred = probe.predict(&test.features)?;
    let mut report = MetricsReport::default();
    match task {
        Task::Binary => {
            let y = test.binary_labels()?;
            report.push("auroc", auroc(&pred, &y)?);
            report.push("f1", f1_positive(&pred, &y, 0.5)?);
        }
        Task::Regression => report.push("rmse", rmse(&pred, &test.labels)?),
    }
    report.push("n_train", train.len() as f64);
    report.push("n_test", test.len() as f64);
    Ok(report)
}
