//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{
    embed_dim, ActivityRow, ColumnKind, ColumnSpec, EntitySequence, FittedSchema, NumericStats,
    Vocab,
};

pub fn fitted(n_num: usize, vocab_sizes: &[usize], statics: bool) -> FittedSchema {
    let mut columns = vec![
        ColumnSpec::new("id", ColumnKind::EntityId),
        ColumnSpec::new("ts", ColumnKind::Timestamp),
    ];
    let numerical = (0..n_num)
        .map(|i| {
            columns.push(ColumnSpec::new(format!("x{i}"), ColumnKind::Numerical));
            NumericStats {
                name: format!("x{i}"),
                mean: 0.0,
                std: 1.0,
            }
        })
        .collect();
    let categorical = vocab_sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            columns.push(ColumnSpec::new(format!("c{i}"), ColumnKind::Categorical));
            Vocab {
                name: format!("c{i}"),
                values: (0..n).map(|v| format!("v{v}")).collect(),
                embed_dim: embed_dim(n),
            }
        })
        .collect();
    let (static_numerical, static_categorical) = if statics {
        columns.push(ColumnSpec::new("age", ColumnKind::StaticNumerical));
        columns.push(ColumnSpec::new("tier", ColumnKind::StaticCategorical));
        (
            vec![NumericStats {
                name: "age".into(),
                mean: 0.0,
                std: 1.0,
            }],
            vec![Vocab {
                name: "tier".into(),
                values: vec!["a".into(), "b".into(), "c".into()],
                embed_dim: 2,
            }],
        )
    } else {
        (vec![], vec![])
    };
    FittedSchema {
        columns,
        numerical,
        categorical,
        static_numerical,
        static_categorical,
    }
}

/// Random sequences with lengths in `min_len..=t`.
pub fn sequences(
    fitted: &FittedSchema,
    n: usize,
    t: usize,
    min_len: usize,
    seed: u64,
) -> Vec<EntitySequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|e| {
            let len = rng.random_range(min_len..=t);
            let statics_num: Vec<f64> = fitted
                .static_numerical
                .iter()
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let statics_cat: Vec<u32> = fitted
                .static_categorical
                .iter()
                .map(|v| rng.random_range(0..=v.values.len() as u32))
                .collect();
            let steps = (0..len)
                .map(|i| ActivityRow {
                    entity: format!("e{e:04}"),
                    ts: i as i64 * 100,
                    numeric: fitted
                        .numerical
                        .iter()
                        .map(|_| rng.random_range(-2.0..2.0))
                        .collect(),
                    codes: fitted
                        .categorical
                        .iter()
                        .map(|v| rng.random_range(1..=v.values.len() as u32))
                        .collect(),
                    static_numeric: statics_num.clone(),
                    static_codes: statics_cat.clone(),
                })
                .collect();
            EntitySequence {
                entity: format!("e{e:04}"),
                steps,
                pad_len: t - len,
                static_numeric: statics_num,
                static_codes: statics_cat,
            }
        })
        .collect()
}
