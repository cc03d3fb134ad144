use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::transformer::EmbeddingRecord;

/// One entity's ranked items (best first) and its relevant set.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingCase {
    pub entity: String,
    pub ranked: Vec<String>,
    pub relevant: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingReport {
    pub map: f64,
    pub prec_at_1: f64,
    /// Mean number of relevant items in the top 5.
    pub success5_count: f64,
    /// Share of cases with at least one relevant item in the top 5.
    pub success5_hit: f64,
    pub ndcg_at_3: f64,
}

fn average_precision(case: &RankingCase) -> f64 {
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (i, item) in case.ranked.iter().enumerate() {
        if case.relevant.contains(item) {
            hits += 1.0;
            sum += hits / (i + 1) as f64;
        }
    }
    sum / case.relevant.len() as f64
}

fn ndcg_at(case: &RankingCase, k: usize) -> f64 {
    let dcg: f64 = case
        .ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| case.relevant.contains(*item))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(case.relevant.len()))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    dcg / ideal
}

pub fn ranking_metrics(cases: &[RankingCase]) -> Result<RankingReport> {
    if cases.is_empty() {
        return Err(Error::Case("no ranking cases".into()));
    }
    let mut r = RankingReport {
        map: 0.0,
        prec_at_1: 0.0,
        success5_count: 0.0,
        success5_hit: 0.0,
        ndcg_at_3: 0.0,
    };
    for c in cases {
        if c.relevant.is_empty() {
            return Err(Error::Case(format!("entity `{}` has no relevant items", c.entity)));
        }
        let distinct: BTreeSet<&String> = c.ranked.iter().collect();
        if distinct.len() != c.ranked.len() {
            return Err(Error::Case(format!("entity `{}` ranks an item twice", c.entity)));
        }
        let top5 = c.ranked.iter().take(5).filter(|i| c.relevant.contains(*i)).count();
        r.map += average_precision(c);
        r.prec_at_1 += c.ranked.first().map_or(0.0, |i| c.relevant.contains(i) as u8 as f64);
        r.success5_count += top5 as f64;
        r.success5_hit += (top5 > 0) as u8 as f64;
        r.ndcg_at_3 += ndcg_at(c, 3);
    }
    let n = cases.len() as f64;
    r.map /= n;
    r.prec_at_1 /= n;
    r.success5_count /= n;
    r.success5_hit /= n;
    r.ndcg_at_3 /= n;
    Ok(r)
}

/// Linear map from item-vector space to entity-embedding space, fitted by
/// least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `[d_in × d_out]`, row-major.
    pub matrix: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Projection {
    /// Minimizes `Σ ‖x_i P − y_i‖²` over the given pairs.
    pub fn fit(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let n = inputs.len();
        if n == 0 || n != targets.len() {
            return Err(Error::shape("projection", &[n], &[targets.len()]));
        }
        let (d_in, d_out) = (inputs[0].len(), targets[0].len());
        if inputs.iter().any(|x| x.len() != d_in) || targets.iter().any(|y| y.len() != d_out) {
            return Err(Error::SchemaMismatch("ragged projection inputs".into()));
        }
        let x = DMatrix::from_fn(n, d_in, |i, j| inputs[i][j]);
        let y = DMatrix::from_fn(n, d_out, |i, j| targets[i][j]);
        let p = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::Numeric(format!("projection solve failed: {e}")))?;
        Ok(Self {
            matrix: (0..d_in * d_out).map(|k| p[(k / d_out, k % d_out)]).collect(),
            d_in,
            d_out,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::SchemaMismatch(format!(
                "projection expects width {}, got {}",
                self.d_in,
                x.len()
            )));
        }
        Ok((0..self.d_out)
            .map(|j| (0..self.d_in).map(|i| x[i] * self.matrix[i * self.d_out + j]).sum())
            .collect())
    }
}

/// An entity id and its items with scores, best first.
pub type Ranking = (String, Vec<(String, f64)>);

/// Scores every item by its dot product with each entity embedding and sorts
/// descending, breaking ties by item id.
pub fn rank_items(
    entities: &[EmbeddingRecord],
    items: &[(String, Vec<f64>)],
    projection: Option<&Projection>,
) -> Result<Vec<Ranking>> {
    let projected: Vec<(String, Vec<f64>)> = match projection {
        Some(p) => items
            .iter()
            .map(|(id, v)| Ok((id.clone(), p.apply(v)?)))
            .collect::<Result<_>>()?,
        None => items.to_vec(),
    };
    let mut out = Vec::with_capacity(entities.len());
    for e in entities {
        let mut scored = Vec::with_capacity(projected.len());
        for (id, v) in &projected {
            if v.len() != e.vector.len() {
                return Err(Error::SchemaMismatch(format!(
                    "item `{id}` has width {} but embeddings have width {}",
                    v.len(),
                    e.vector.len()
                )));
            }
            let s: f64 = v.iter().zip(&e.vector).map(|(a, b)| a * b).sum();
            if !s.is_finite() {
                return Err(Error::Numeric(format!("non-finite score for item `{id}`")));
            }
            scored.push((id.clone(), s));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.push((e.entity.clone(), scored));
    }
    Ok(out)
}
