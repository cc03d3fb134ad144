//! Entity embeddings for timestamped tabular activity logs.
//!
//! Raw activity rows are grouped into per-entity sequences ([`ingest`]),
//! encoded by a transformer encoder-decoder ([`transformer`]) pretrained to
//! reconstruct randomly masked steps ([`pretrain`]), and pooled into one
//! vector per entity. [`rfm`] provides the classical recency/frequency/monetary
//! baseline, [`metrics`] the downstream probes and scores, and [`synthgen`] a
//! seeded generator with an order-only signal.

pub mod autodiff;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod pretrain;
pub mod rfm;
pub mod synthgen;
pub mod transformer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
