//! Lookup-table attention scoring over rotated, scalar-quantized KV caches.
//!
//! Keys are rotated by a signed Walsh-Hadamard transform, quantized per
//! coordinate against a Lloyd-Max codebook and packed with an f16 norm.
//! Queries are scored by building a small per-query table and summing
//! lookups, so the per-key multiplication count drops to one.

pub mod codebook;
pub mod counter;
pub mod error;
pub mod evalkit;
pub mod formats;
pub mod gaussian;
pub mod matrix;
pub mod read_path;
pub mod reference;
pub mod signopt;
pub mod transform;
pub mod write_path;

pub use error::{Error, Result};
