//! Dequantization-free read datapath.
//!
//! Once per query: rotate the query with the same butterfly network as the
//! write path and build the product table P[i][j] = q_rot[i]·c_j. Per stored
//! key: look up P[i][idx_i] for every coordinate, reduce with a balanced adder
//! tree and scale by the stored norm. No inverse transform is involved; the
//! conventional reconstruct-then-dot path lives in [`crate::reference`].

use half::f16;
use serde::Serialize;

use crate::codebook::Codebook;
use crate::counter::{Category, OpCounter};
use crate::error::{check_len, Error, Result};
use crate::transform::RotationSpec;
use crate::write_path::QuantizedKey;

/// Per-query product table, d rows of 2^b entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedTable {
    d: usize,
    bits: u8,
    q_rot: Vec<f64>,
    entries: Vec<f64>,
}

impl PrecomputedTable {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    pub fn rotated_query(&self) -> &[f64] {
        &self.q_rot
    }

    /// All d·2^b entries, row-major.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.levels();
        &self.entries[i * l..(i + 1) * l]
    }

    fn leaves<'a>(&'a self, qk: &'a QuantizedKey) -> Result<impl Iterator<Item = f64> + 'a> {
        check_len(self.d, qk.dim(), "quantized key")?;
        let levels = self.levels();
        if let Some(&bad) = qk.indices.iter().find(|&&i| i as usize >= levels) {
            return Err(Error::CorruptCache(format!(
                "index {bad} out of range for {}-bit table",
                self.bits
            )));
        }
        Ok(qk
            .indices
            .iter()
            .enumerate()
            .map(move |(i, &j)| self.entries[i * levels + j as usize]))
    }
}

pub fn precompute_table(
    q: &[f64],
    spec: &RotationSpec,
    cb: &Codebook,
    counter: &mut OpCounter,
) -> Result<PrecomputedTable> {
    let d = spec.dim();
    check_len(d, cb.dim(), "codebook dimension")?;
    check_len(d, q.len(), "query")?;
    let mut q_rot = vec![0.0; d];
    spec.rotate_into(q, &mut q_rot, counter)?;
    let entries: Vec<f64> = q_rot
        .iter()
        .flat_map(|&qi| cb.centroids().iter().map(move |&c| qi * c))
        .collect();
    counter.mults(Category::Table, entries.len() as u64);
    Ok(PrecomputedTable {
        d,
        bits: cb.bits(),
        q_rot,
        entries,
    })
}

/// Balanced pairwise reduction over the leaves in coordinate order, with
/// `round` applied to every partial sum. Uses exactly n − 1 additions.
fn adder_tree(mut level: Vec<f64>, round: impl Fn(f64) -> f64) -> f64 {
    while level.len() > 1 {
        level = level.chunks(2).map(|p| round(p.iter().sum())).collect();
    }
    level.first().copied().unwrap_or(0.0)
}

/// (Σ_i P[i][idx_i])·‖k‖ in double precision.
pub fn score_key(tbl: &PrecomputedTable, qk: &QuantizedKey, counter: &mut OpCounter) -> Result<f64> {
    let leaves: Vec<f64> = tbl.leaves(qk)?.collect();
    let d = leaves.len() as u64;
    let sum = adder_tree(leaves, |x| x);
    counter.lookups(Category::Score, d);
    counter.adds(Category::Score, d.saturating_sub(1));
    counter.mults(Category::Score, 1);
    Ok(sum * qk.norm.to_f64())
}

/// Result of the half-precision datapath.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalfScore {
    pub value: f16,
    /// Set when a table entry, partial sum or the product overflowed the half
    /// range; `value` is then clamped to ±f16::MAX.
    pub saturated: bool,
}

impl HalfScore {
    pub fn to_f64(self) -> f64 {
        self.value.to_f64()
    }
}

/// Half-precision datapath: table entries, every adder-tree partial sum and
/// the final norm product are each rounded to f16 (nearest even).
pub fn score_key_fp16(
    tbl: &PrecomputedTable,
    qk: &QuantizedKey,
    counter: &mut OpCounter,
) -> Result<HalfScore> {
    let overflow = std::cell::Cell::new(false);
    let round = |x: f64| {
        let h = f16::from_f64(x);
        if h.is_infinite() {
            overflow.set(true);
            if x > 0.0 { f16::MAX } else { f16::MIN }.to_f64()
        } else {
            h.to_f64()
        }
    };
    let leaves: Vec<f64> = tbl.leaves(qk)?.map(round).collect();
    let d = leaves.len() as u64;
    let sum = adder_tree(leaves, round);
    let value = round(sum * qk.norm.to_f64());
    counter.lookups(Category::Score, d);
    counter.adds(Category::Score, d.saturating_sub(1));
    counter.mults(Category::Score, 1);
    Ok(HalfScore {
        value: f16::from_f64(value),
        saturated: overflow.get(),
    })
}

fn check_cache(cache: &[QuantizedKey], d: usize, bits: u8) -> Result<()> {
    let levels = 1usize << bits;
    for (t, qk) in cache.iter().enumerate() {
        if qk.dim() != d {
            return Err(Error::InvalidDimension(format!(
                "cache entry {t} has {} indices, expected {d}",
                qk.dim()
            )));
        }
        if qk.indices.iter().any(|&i| i as usize >= levels) {
            return Err(Error::CorruptCache(format!(
                "cache entry {t} has an index outside the {bits}-bit range"
            )));
        }
    }
    Ok(())
}

/// One table build followed by T lookups: d·2^b + T multiplications.
pub fn score_sequence(
    q: &[f64],
    cache: &[QuantizedKey],
    spec: &RotationSpec,
    cb: &Codebook,
) -> Result<(Vec<f64>, OpCounter)> {
    check_cache(cache, spec.dim(), cb.bits())?;
    let mut counter = OpCounter::new();
    let tbl = precompute_table(q, spec, cb, &mut counter)?;
    let scores = cache
        .iter()
        .map(|qk| score_key(&tbl, qk, &mut counter))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, counter))
}

pub fn score_sequence_fp16(
    q: &[f64],
    cache: &[QuantizedKey],
    spec: &RotationSpec,
    cb: &Codebook,
) -> Result<(Vec<HalfScore>, OpCounter)> {
    check_cache(cache, spec.dim(), cb.bits())?;
    let mut counter = OpCounter::new();
    let tbl = precompute_table(q, spec, cb, &mut counter)?;
    let scores = cache
        .iter()
        .map(|qk| score_key_fp16(&tbl, qk, &mut counter))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, counter))
}
