use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::schema::{ColumnKind, ColumnSpec, Schema};
use crate::error::{Error, Result};

/// One CSV data row with fields reordered to match the schema's column order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub fields: Vec<String>,
}

impl RawRecord {
    pub fn new(row: usize, fields: Vec<String>) -> Self {
        Self { row, fields }
    }
}

/// Reads a headered CSV and projects each row onto the schema columns.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = Vec::with_capacity(schema.columns().len());
    for c in schema.columns() {
        let pos = headers.iter().position(|h| h == c.name).ok_or_else(|| {
            Error::SchemaMismatch(format!("column `{}` missing from CSV header", c.name))
        })?;
        index.push(pos);
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        out.push(RawRecord::new(
            row,
            index.iter().map(|&p| rec[p].to_owned()).collect(),
        ));
    }
    Ok(out)
}

pub fn read_csv_path(path: &Path, schema: &Schema) -> Result<Vec<RawRecord>> {
    read_csv(std::fs::File::open(path)?, schema)
}

/// Integer epoch seconds, or ISO-8601 (RFC 3339, naive date-time taken as
/// UTC, or a bare date at midnight UTC).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp())
}

fn parse_number(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        row,
        msg: format!("column `{col}`: `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            msg: format!("column `{col}`: non-finite value"),
        });
    }
    Ok(v)
}

fn check_arity(rec: &RawRecord, schema_len: usize) -> Result<()> {
    if rec.fields.len() != schema_len {
        return Err(Error::Parse {
            row: rec.row,
            msg: format!("expected {schema_len} fields, found {}", rec.fields.len()),
        });
    }
    Ok(())
}

/// `ceil(sqrt(cardinality))`, at least 1.
pub fn embed_dim(cardinality: usize) -> usize {
    let mut d = (cardinality as f64).sqrt().ceil() as usize;
    // guard against floating error around perfect squares
    while d > 1 && (d - 1) * (d - 1) >= cardinality {
        d -= 1;
    }
    while d * d < cardinality {
        d += 1;
    }
    d.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl NumericStats {
    pub fn z(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub name: String,
    /// Distinct values in first-seen order; value `values[i]` has code `i + 1`.
    pub values: Vec<String>,
    pub embed_dim: usize,
}

impl Vocab {
    /// Number of embedding rows including the reserved code 0.
    pub fn table_rows(&self) -> usize {
        self.values.len() + 1
    }
}

/// Schema plus the vocabularies and normalization statistics fitted on data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSchema {
    pub columns: Vec<ColumnSpec>,
    pub numerical: Vec<NumericStats>,
    pub categorical: Vec<Vocab>,
    pub static_numerical: Vec<NumericStats>,
    pub static_categorical: Vec<Vocab>,
}

impl FittedSchema {
    pub fn schema(&self) -> Result<Schema> {
        Schema::new(self.columns.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("json")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn vocab(&self, name: &str) -> Option<&Vocab> {
        self.categorical
            .iter()
            .chain(&self.static_categorical)
            .find(|v| v.name == name)
    }
}

#[derive(Debug, Clone, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    fn finish(&self, name: &str) -> NumericStats {
        let var = if self.n > 0 { self.m2 / self.n as f64 } else { 0.0 };
        let std = var.sqrt();
        NumericStats {
            name: name.to_owned(),
            mean: self.mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone, Default)]
struct VocabBuilder {
    values: Vec<String>,
    seen: HashMap<String, u32>,
}

impl VocabBuilder {
    fn push(&mut self, v: &str) {
        if !self.seen.contains_key(v) {
            self.values.push(v.to_owned());
            self.seen.insert(v.to_owned(), self.values.len() as u32);
        }
    }
}

/// Incremental fitter. Shards can be fitted independently and merged in file
/// order; merging reproduces single-pass vocabularies and statistics.
#[derive(Debug, Clone)]
pub struct SchemaAccumulator {
    schema: Schema,
    rows: usize,
    numeric: Vec<Welford>,
    vocabs: Vec<VocabBuilder>,
}

impl SchemaAccumulator {
    pub fn new(schema: &Schema) -> Self {
        let n = schema.columns().len();
        Self {
            schema: schema.clone(),
            rows: 0,
            numeric: vec![Welford::default(); n],
            vocabs: vec![VocabBuilder::default(); n],
        }
    }

    pub fn observe(&mut self, rec: &RawRecord) -> Result<()> {
        check_arity(rec, self.schema.columns().len())?;
        for (i, c) in self.schema.columns().iter().enumerate() {
            let f = &rec.fields[i];
            match c.kind {
                ColumnKind::EntityId => {}
                ColumnKind::Timestamp => {
                    parse_timestamp(f).ok_or_else(|| Error::Parse {
                        row: rec.row,
                        msg: format!("column `{}`: bad timestamp `{f}`", c.name),
                    })?;
                }
                ColumnKind::Numerical | ColumnKind::StaticNumerical => {
                    self.numeric[i].push(parse_number(f, rec.row, &c.name)?)
                }
                ColumnKind::Categorical | ColumnKind::StaticCategorical => self.vocabs[i].push(f),
            }
        }
        self.rows += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &SchemaAccumulator) {
        self.rows += other.rows;
        for (a, b) in self.numeric.iter_mut().zip(&other.numeric) {
            a.merge(b);
        }
        for (a, b) in self.vocabs.iter_mut().zip(&other.vocabs) {
            for v in &b.values {
                a.push(v);
            }
        }
    }

    pub fn finish(&self) -> Result<FittedSchema> {
        if self.rows == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut fitted = FittedSchema {
            columns: self.schema.columns().to_vec(),
            numerical: vec![],
            categorical: vec![],
            static_numerical: vec![],
            static_categorical: vec![],
        };
        for (i, c) in self.schema.columns().iter().enumerate() {
            let vocab = || Vocab {
                name: c.name.clone(),
                values: self.vocabs[i].values.clone(),
                embed_dim: embed_dim(self.vocabs[i].values.len()),
            };
            match c.kind {
                ColumnKind::Numerical => fitted.numerical.push(self.numeric[i].finish(&c.name)),
                ColumnKind::StaticNumerical => {
                    fitted.static_numerical.push(self.numeric[i].finish(&c.name))
                }
                ColumnKind::Categorical => fitted.categorical.push(vocab()),
                ColumnKind::StaticCategorical => fitted.static_categorical.push(vocab()),
                _ => {}
            }
        }
        Ok(fitted)
    }
}

/// Builds vocabularies (first-seen order) and z-score statistics.
pub fn fit_schema<'a>(
    rows: impl IntoIterator<Item = &'a RawRecord>,
    schema: &Schema,
) -> Result<FittedSchema> {
    let mut acc = SchemaAccumulator::new(schema);
    for r in rows {
        acc.observe(r)?;
    }
    acc.finish()
}

/// One encoded activity: categorical codes (0 = out of vocabulary) and
/// z-scored numericals, in schema order within each group.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityRow {
    pub entity: String,
    pub ts: i64,
    pub numeric: Vec<f64>,
    pub codes: Vec<u32>,
    pub static_numeric: Vec<f64>,
    pub static_codes: Vec<u32>,
}

/// Maps raw records to [`ActivityRow`]s against a fitted schema.
pub struct RowEncoder<'a> {
    fitted: &'a FittedSchema,
    lookups: HashMap<String, HashMap<&'a str, u32>>,
}

impl<'a> RowEncoder<'a> {
    pub fn new(fitted: &'a FittedSchema) -> Self {
        let lookups = fitted
            .categorical
            .iter()
            .chain(&fitted.static_categorical)
            .map(|v| {
                let m = v
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.as_str(), i as u32 + 1))
                    .collect();
                (v.name.clone(), m)
            })
            .collect();
        Self { fitted, lookups }
    }

    pub fn code(&self, column: &str, value: &str) -> u32 {
        self.lookups
            .get(column)
            .and_then(|m| m.get(value).copied())
            .unwrap_or(0)
    }

    pub fn encode(&self, rec: &RawRecord) -> Result<ActivityRow> {
        let cols = &self.fitted.columns;
        check_arity(rec, cols.len())?;
        let mut row = ActivityRow {
            entity: String::new(),
            ts: 0,
            numeric: Vec::with_capacity(self.fitted.numerical.len()),
            codes: Vec::with_capacity(self.fitted.categorical.len()),
            static_numeric: Vec::with_capacity(self.fitted.static_numerical.len()),
            static_codes: Vec::with_capacity(self.fitted.static_categorical.len()),
        };
        let (mut ni, mut sni) = (0, 0);
        for (c, f) in cols.iter().zip(&rec.fields) {
            match c.kind {
                ColumnKind::EntityId => row.entity = f.clone(),
                ColumnKind::Timestamp => {
                    row.ts = parse_timestamp(f).ok_or_else(|| Error::Parse {
                        row: rec.row,
                        msg: format!("column `{}`: bad timestamp `{f}`", c.name),
                    })?
                }
                ColumnKind::Numerical => {
                    let stats = &self.fitted.numerical[ni];
                    row.numeric.push(stats.z(parse_number(f, rec.row, &c.name)?));
                    ni += 1;
                }
                ColumnKind::StaticNumerical => {
                    let stats = &self.fitted.static_numerical[sni];
                    row.static_numeric
                        .push(stats.z(parse_number(f, rec.row, &c.name)?));
                    sni += 1;
                }
                ColumnKind::Categorical => row.codes.push(self.code(&c.name, f)),
                ColumnKind::StaticCategorical => row.static_codes.push(self.code(&c.name, f)),
            }
        }
        Ok(row)
    }
}

pub fn encode_rows<'a>(
    rows: impl IntoIterator<Item = &'a RawRecord>,
    fitted: &FittedSchema,
) -> Result<Vec<ActivityRow>> {
    let enc = RowEncoder::new(fitted);
    rows.into_iter().map(|r| enc.encode(r)).collect()
}
