use std::collections::BTreeMap;

use super::fit::ActivityRow;
use crate::error::{Error, Result};

/// An entity's most recent activities, oldest first, left-padded to `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntitySequence {
    pub entity: String,
    pub steps: Vec<ActivityRow>,
    pub pad_len: usize,
    pub static_numeric: Vec<f64>,
    pub static_codes: Vec<u32>,
}

impl EntitySequence {
    pub fn len(&self) -> usize {
        self.steps.len() + self.pad_len
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step at absolute position `p` in `0..t`, `None` for padding.
    pub fn step_at(&self, p: usize) -> Option<&ActivityRow> {
        p.checked_sub(self.pad_len).and_then(|i| self.steps.get(i))
    }
}

/// Groups rows by entity, sorts each group by timestamp (stable, so ties keep
/// input order), keeps the latest `t` and records the left padding.
/// Entities come out sorted by id.
pub fn build_sequences(
    rows: impl IntoIterator<Item = ActivityRow>,
    t: usize,
) -> Result<Vec<EntitySequence>> {
    if t == 0 {
        return Err(Error::Config("sequence length t must be at least 1".into()));
    }
    let mut groups: BTreeMap<String, Vec<ActivityRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.entity.clone()).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(entity, mut steps)| {
            steps.sort_by_key(|r| r.ts);
            if steps.len() > t {
                steps.drain(..steps.len() - t);
            }
            let last = steps.last().expect("group is non-empty");
            EntitySequence {
                static_numeric: last.static_numeric.clone(),
                static_codes: last.static_codes.clone(),
                entity,
                pad_len: t - steps.len(),
                steps,
            }
        })
        .collect())
}
