//! Schema-driven CSV ingestion: fitting vocabularies and z-score statistics,
//! encoding rows, and building per-entity activity sequences.

mod fit;
mod schema;
mod sequence;

pub use fit::{
    embed_dim, encode_rows, fit_schema, parse_timestamp, read_csv, read_csv_path, ActivityRow,
    FittedSchema, NumericStats, RawRecord, RowEncoder, SchemaAccumulator, Vocab,
};
pub use schema::{ColumnKind, ColumnRole, ColumnSpec, Schema};
pub use sequence::{build_sequences, EntitySequence};

use crate::error::Result;

/// Encodes `rows` and builds sequences of length `t` in one call.
pub fn prepare_sequences(
    rows: &[RawRecord],
    fitted: &FittedSchema,
    t: usize,
) -> Result<Vec<EntitySequence>> {
    build_sequences(encode_rows(rows, fitted)?, t)
}
