use std::ops::Range;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::ingest::EntitySequence;

/// Dense, position-major view of a batch of entity sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub b: usize,
    pub t: usize,
    pub n_num: usize,
    pub n_cat: usize,
    pub n_static_num: usize,
    pub n_static_cat: usize,
    pub entities: Vec<String>,
    /// `[b*t]`, true at real (non-pad) positions.
    pub real: Vec<bool>,
    /// `[b*t*n_num]`, z-scored values, 0 at pads.
    pub numeric: Vec<f64>,
    /// `[b*t*n_cat]`, codes, 0 at pads.
    pub codes: Vec<u32>,
    pub static_numeric: Vec<f64>,
    pub static_codes: Vec<u32>,
}

impl SeqBatch {
    /// Widths are taken from the first sequence with any steps.
    pub fn from_sequences(seqs: &[&EntitySequence], t: usize) -> Result<Self> {
        let first = seqs.first().ok_or(Error::EmptyDataset)?;
        let step = seqs.iter().find_map(|s| s.steps.first());
        let widths = [
            step.map_or(0, |s| s.numeric.len()),
            step.map_or(0, |s| s.codes.len()),
            first.static_numeric.len(),
            first.static_codes.len(),
        ];
        Self::with_widths(seqs, t, widths)
    }

    /// Builds a batch with explicit `[n_num, n_cat, n_static_num, n_static_cat]`.
    pub fn with_widths(seqs: &[&EntitySequence], t: usize, widths: [usize; 4]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let [n_num, n_cat, n_static_num, n_static_cat] = widths;
        let b = seqs.len();
        let mut out = SeqBatch {
            b,
            t,
            n_num,
            n_cat,
            n_static_num,
            n_static_cat,
            entities: Vec::with_capacity(b),
            real: vec![false; b * t],
            numeric: vec![0.0; b * t * n_num],
            codes: vec![0; b * t * n_cat],
            static_numeric: Vec::with_capacity(b * n_static_num),
            static_codes: Vec::with_capacity(b * n_static_cat),
        };
        for (bi, s) in seqs.iter().enumerate() {
            if s.len() != t {
                return Err(Error::SchemaMismatch(format!(
                    "sequence for `{}` has length {} but the model expects {t}",
                    s.entity,
                    s.len()
                )));
            }
            if s.static_numeric.len() != n_static_num || s.static_codes.len() != n_static_cat {
                return Err(Error::SchemaMismatch("inconsistent static widths in batch".into()));
            }
            out.entities.push(s.entity.clone());
            out.static_numeric.extend_from_slice(&s.static_numeric);
            out.static_codes.extend_from_slice(&s.static_codes);
            for (i, step) in s.steps.iter().enumerate() {
                if step.numeric.len() != n_num || step.codes.len() != n_cat {
                    return Err(Error::SchemaMismatch("inconsistent step widths in batch".into()));
                }
                let p = bi * t + s.pad_len + i;
                out.real[p] = true;
                out.numeric[p * n_num..(p + 1) * n_num].copy_from_slice(&step.numeric);
                out.codes[p * n_cat..(p + 1) * n_cat].copy_from_slice(&step.codes);
            }
        }
        Ok(out)
    }

    /// Rows `range` as a standalone batch.
    pub fn select(&self, range: Range<usize>) -> SeqBatch {
        let (t, r) = (self.t, range.clone());
        let pos = r.start * t..r.end * t;
        SeqBatch {
            b: r.len(),
            t,
            n_num: self.n_num,
            n_cat: self.n_cat,
            n_static_num: self.n_static_num,
            n_static_cat: self.n_static_cat,
            entities: self.entities[r.clone()].to_vec(),
            real: self.real[pos.clone()].to_vec(),
            numeric: self.numeric[pos.start * self.n_num..pos.end * self.n_num].to_vec(),
            codes: self.codes[pos.start * self.n_cat..pos.end * self.n_cat].to_vec(),
            static_numeric: self.static_numeric
                [r.start * self.n_static_num..r.end * self.n_static_num]
                .to_vec(),
            static_codes: self.static_codes[r.start * self.n_static_cat..r.end * self.n_static_cat]
                .to_vec(),
        }
    }

    pub fn real_count(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }

    pub fn real_in_row(&self, bi: usize) -> usize {
        self.real[bi * self.t..(bi + 1) * self.t]
            .iter()
            .filter(|&&r| r)
            .count()
    }

    /// Categorical codes of column `c` for every position.
    pub fn codes_of(&self, c: usize) -> Vec<u32> {
        (0..self.b * self.t)
            .map(|p| self.codes[p * self.n_cat + c])
            .collect()
    }

    pub fn numeric_of(&self, c: usize) -> Vec<f64> {
        (0..self.b * self.t)
            .map(|p| self.numeric[p * self.n_num + c])
            .collect()
    }
}

/// Positions replaced by zero vectors at the model input.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub b: usize,
    pub t: usize,
    pub marked: Vec<bool>,
}

impl MaskPlan {
    pub fn none(b: usize, t: usize) -> Self {
        Self {
            b,
            t,
            marked: vec![false; b * t],
        }
    }

    pub fn count(&self) -> usize {
        self.marked.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn select(&self, range: Range<usize>) -> MaskPlan {
        MaskPlan {
            b: range.len(),
            t: self.t,
            marked: self.marked[range.start * self.t..range.end * self.t].to_vec(),
        }
    }
}

/// Boolean attention pattern `[b, tq, tk]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub b: usize,
    pub tq: usize,
    pub tk: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(b: usize, tq: usize, tk: usize) -> Self {
        Self {
            b,
            tq,
            tk,
            allowed: vec![true; b * tq * tk],
        }
    }

    /// Keys at pad positions are hidden; when `causal`, keys after the query
    /// are hidden too. A query may always see itself, so pad queries keep one
    /// attendable key (their outputs are never read by real positions).
    pub fn for_batch(batch: &SeqBatch, causal: bool) -> Self {
        let (b, t) = (batch.b, batch.t);
        let mut allowed = vec![false; b * t * t];
        for bi in 0..b {
            for q in 0..t {
                for k in 0..t {
                    let ok = (batch.real[bi * t + k] && (!causal || k <= q)) || k == q;
                    allowed[(bi * t + q) * t + k] = ok;
                }
            }
        }
        Self {
            b,
            tq: t,
            tk: t,
            allowed,
        }
    }

    /// Lower-triangular pattern without padding.
    pub fn causal(b: usize, t: usize) -> Self {
        let mut allowed = vec![false; b * t * t];
        for bi in 0..b {
            for q in 0..t {
                for k in 0..=q {
                    allowed[(bi * t + q) * t + k] = true;
                }
            }
        }
        Self {
            b,
            tq: t,
            tk: t,
            allowed,
        }
    }

    /// First (batch, query) row with no attendable key.
    pub fn empty_row(&self) -> Option<(usize, usize)> {
        (0..self.b * self.tq)
            .find(|&r| !self.allowed[r * self.tk..(r + 1) * self.tk].iter().any(|&a| a))
            .map(|r| (r / self.tq, r % self.tq))
    }

    /// Additive form: 0 where allowed, −1e9 elsewhere.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let neg = T::lit(-1e9);
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { neg })
            .collect();
        Tensor::new(&[self.b, self.tq, self.tk], data).expect("mask shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ActivityRow;

    fn seq(entity: &str, n: usize, t: usize) -> EntitySequence {
        EntitySequence {
            entity: entity.into(),
            steps: (0..n)
                .map(|i| ActivityRow {
                    entity: entity.into(),
                    ts: i as i64,
                    numeric: vec![i as f64],
                    codes: vec![i as u32 + 1],
                    static_numeric: vec![],
                    static_codes: vec![],
                })
                .collect(),
            pad_len: t - n,
            static_numeric: vec![],
            static_codes: vec![],
        }
    }

    #[test]
    fn batch_layout_left_pads() {
        let a = seq("a", 2, 4);
        let b = seq("b", 4, 4);
        let batch = SeqBatch::from_sequences(&[&a, &b], 4).unwrap();
        assert_eq!(batch.real, [false, false, true, true, true, true, true, true]);
        assert_eq!(batch.numeric_of(0)[..4], [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(batch.codes_of(0)[4..], [1, 2, 3, 4]);
        let second = batch.select(1..2);
        assert_eq!(second.entities, ["b"]);
        assert_eq!(second.real_count(), 4);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = AttnMask::causal(1, 3);
        let want = [true, false, false, true, true, false, true, true, true];
        assert_eq!(m.allowed, want);
    }

    #[test]
    fn batch_mask_hides_pad_keys_but_never_empties_rows() {
        let a = seq("a", 2, 4);
        let batch = SeqBatch::from_sequences(&[&a], 4).unwrap();
        for causal in [false, true] {
            let m = AttnMask::for_batch(&batch, causal);
            assert_eq!(m.empty_row(), None);
            // real query 3 never sees pad keys 0, 1
            assert!(!m.allowed[3 * 4] && !m.allowed[3 * 4 + 1]);
        }
        let m = AttnMask::for_batch(&batch, true);
        // query 2 cannot see key 3
        assert!(!m.allowed[2 * 4 + 3]);
    }
}
