//! Gradient-free per-layer sign selection.
//!
//! For each layer, C candidate sign vectors (seeds base_seed+1 ..= base_seed+C)
//! are scored by the rotated-domain quantize/dequantize MSE of the
//! row-normalized calibration keys, and the minimizer is written to that
//! layer's sign ROM. The codebook and the datapath are unchanged; only the
//! ROM contents differ from the default seed-derived signs.

use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::{solve_codebook, Codebook, DEFAULT_TOL};
use crate::counter::OpCounter;
use crate::error::{check_len, Error, Result};
use crate::formats::{encode_sign_rom, SGN_HEADER_LEN};
use crate::matrix::Matrix;
use crate::transform::{random_signs, RotationSpec, SignVector};

/// Raw (unnormalized) calibration keys for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    keys: Matrix,
    layer_id: u32,
    source: String,
}

impl CalibrationSet {
    pub fn new(keys: Matrix, layer_id: u32, source: impl Into<String>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::InvalidInput("calibration set needs at least one row".into()));
        }
        if keys.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("calibration keys contain non-finite values".into()));
        }
        Ok(Self {
            keys,
            layer_id,
            source: source.into(),
        })
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Mean Euclidean norm over all rows.
    pub fn mean_norm(&self) -> f64 {
        let total: f64 = self.keys.rows().map(l2).sum();
        total / self.keys.n_rows() as f64
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Unit-norm rows with zero rows removed.
#[derive(Debug, Clone)]
pub(crate) struct UnitRows {
    rows: Matrix,
    dropped: usize,
}

impl UnitRows {
    pub(crate) fn from_matrix(keys: &Matrix) -> Result<Self> {
        let mut data = Vec::with_capacity(keys.as_slice().len());
        let mut dropped = 0;
        for row in keys.rows() {
            let n = l2(row);
            if n > 0.0 {
                data.extend(row.iter().map(|v| v / n));
            } else {
                dropped += 1;
            }
        }
        if data.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        Ok(Self {
            rows: Matrix::new(keys.dim(), data)?,
            dropped,
        })
    }

    /// ‖Y − QDQ(Y)‖²_F / (N·d) with Y the rotated rows. Rows are summed in
    /// order so the result is reproducible bit for bit.
    pub(crate) fn qdq_mse(&self, signs: &SignVector, cb: &Codebook) -> Result<f64> {
        let d = self.rows.dim();
        check_len(d, signs.dim(), "sign vector")?;
        check_len(d, cb.dim(), "codebook dimension")?;
        let spec = RotationSpec::new(signs.clone())?;
        let centroids = cb.centroids();
        let mut scratch = OpCounter::new();
        let mut y = vec![0.0; d];
        let mut total = 0.0;
        for row in self.rows.rows() {
            spec.rotate_into(row, &mut y, &mut scratch)?;
            let err: f64 = y
                .iter()
                .map(|&v| {
                    let e = v - centroids[cb.cell_index(v) as usize];
                    e * e
                })
                .sum();
            total += err;
        }
        Ok(total / (self.rows.n_rows() * d) as f64)
    }
}

/// Rotated-domain quantization MSE of the row-normalized keys under `s`.
pub fn candidate_mse(keys: &CalibrationSet, s: &SignVector, cb: &Codebook) -> Result<f64> {
    UnitRows::from_matrix(&keys.keys)?.qdq_mse(s, cb)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignSearchReport {
    pub layer_id: u32,
    pub bits: u8,
    pub candidate_count: usize,
    pub base_seed: u64,
    pub candidate_seeds: Vec<u64>,
    pub candidate_mse: Vec<f64>,
    pub selected_seed: u64,
    pub selected_signs: SignVector,
    pub best_mse: f64,
    pub worst_mse: f64,
    /// worst / best.
    pub spread: f64,
    pub calibration_rows: usize,
    pub dropped_rows: usize,
}

/// Solves the codebook for (d, bits) and runs [`select_signs_with_codebook`].
pub fn select_signs(
    keys: &CalibrationSet,
    candidates: usize,
    bits: u8,
    base_seed: u64,
) -> Result<SignSearchReport> {
    let cb = solve_codebook(keys.dim(), bits, DEFAULT_TOL)?;
    select_signs_with_codebook(keys, candidates, &cb, base_seed)
}

pub fn select_signs_with_codebook(
    keys: &CalibrationSet,
    candidates: usize,
    cb: &Codebook,
    base_seed: u64,
) -> Result<SignSearchReport> {
    if candidates == 0 {
        return Err(Error::InvalidInput("candidate count must be at least 1".into()));
    }
    check_len(cb.dim(), keys.dim(), "calibration keys")?;
    let units = UnitRows::from_matrix(&keys.keys)?;
    let d = keys.dim();
    let seeds: Vec<u64> = (1..=candidates as u64)
        .map(|c| base_seed.wrapping_add(c))
        .collect();
    let mse = seeds
        .par_iter()
        .map(|&seed| units.qdq_mse(&random_signs(d, seed), cb))
        .collect::<Result<Vec<f64>>>()?;

    // argmin by (mse, seed); seeds are ascending so the first minimum wins.
    let (best_idx, &best) = mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .expect("at least one candidate");
    let worst = mse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let selected_seed = seeds[best_idx];
    Ok(SignSearchReport {
        layer_id: keys.layer_id,
        bits: cb.bits(),
        candidate_count: candidates,
        base_seed,
        candidate_seeds: seeds,
        candidate_mse: mse,
        selected_seed,
        selected_signs: random_signs(d, selected_seed).with_layer_id(keys.layer_id),
        best_mse: best,
        worst_mse: worst,
        spread: if best > 0.0 { worst / best } else if worst > 0.0 { f64::INFINITY } else { 1.0 },
        calibration_rows: units.rows.n_rows(),
        dropped_rows: units.dropped,
    })
}

/// Per-layer selections and the multi-layer sign ROM built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub reports: Vec<SignSearchReport>,
    pub rom: Vec<u8>,
}

impl LayerSelection {
    pub fn signs(&self) -> Vec<SignVector> {
        self.reports.iter().map(|r| r.selected_signs.clone()).collect()
    }

    /// Sign bytes excluding the file header.
    pub fn payload_len(&self) -> usize {
        self.rom.len() - SGN_HEADER_LEN
    }
}

/// Independent selection per layer; output records follow input order.
pub fn select_signs_all_layers(
    layers: &[CalibrationSet],
    candidates: usize,
    bits: u8,
    base_seed: u64,
) -> Result<LayerSelection> {
    let d = match layers.first() {
        Some(l) => l.dim(),
        None => return Err(Error::InvalidInput("no calibration layers given".into())),
    };
    if let Some(bad) = layers.iter().find(|l| l.dim() != d) {
        return Err(Error::InvalidDimension(format!(
            "layer {} has d={}, expected {d}",
            bad.layer_id(),
            bad.dim()
        )));
    }
    let cb = solve_codebook(d, bits, DEFAULT_TOL)?;
    let reports = layers
        .iter()
        .map(|l| select_signs_with_codebook(l, candidates, &cb, base_seed))
        .collect::<Result<Vec<_>>>()?;
    let signs: Vec<SignVector> = reports.iter().map(|r| r.selected_signs.clone()).collect();
    let rom = encode_sign_rom(&signs)?;
    Ok(LayerSelection { reports, rom })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    /// Ratio below 2: default seed-derived signs are safe.
    CalibrationFreeSafe,
    /// Ratio above 5: run the sign search.
    OptimizationRecommended,
    /// In between: validate per model.
    Indeterminate,
}

impl Recommendation {
    pub fn from_ratio(ratio: f64) -> Self {
        if ratio < 2.0 {
            Self::CalibrationFreeSafe
        } else if ratio > 5.0 {
            Self::OptimizationRecommended
        } else {
            Self::Indeterminate
        }
    }

    pub fn message(self) -> &'static str {
        match self {
            Self::CalibrationFreeSafe => "calibration-free safe",
            Self::OptimizationRecommended => "optimization recommended",
            Self::Indeterminate => "indeterminate, validate per-model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerNorm {
    pub layer_id: u32,
    pub mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormDiagnostic {
    pub layers: Vec<LayerNorm>,
    /// max / min of the per-layer mean norms.
    pub ratio: f64,
    pub recommendation: Recommendation,
    pub message: &'static str,
}

impl NormDiagnostic {
    pub fn from_mean_norms(layers: Vec<LayerNorm>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("norm diagnostic needs at least one layer".into()));
        }
        let max = layers.iter().map(|l| l.mean_norm).fold(f64::NEG_INFINITY, f64::max);
        let min = layers.iter().map(|l| l.mean_norm).fold(f64::INFINITY, f64::min);
        let ratio = if max == min { 1.0 } else { max / min };
        let recommendation = Recommendation::from_ratio(ratio);
        Ok(Self {
            layers,
            ratio,
            recommendation,
            message: recommendation.message(),
        })
    }
}

pub fn norm_ratio_diagnostic(layers: &[CalibrationSet]) -> Result<NormDiagnostic> {
    NormDiagnostic::from_mean_norms(
        layers
            .iter()
            .map(|l| LayerNorm {
                layer_id: l.layer_id(),
                mean_norm: l.mean_norm(),
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::fwht;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_set(seed: u64, n: usize, d: usize, layer: u32) -> CalibrationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        CalibrationSet::new(Matrix::new(d, data).unwrap(), layer, "test").unwrap()
    }

    #[test]
    fn centroid_valued_rows_have_zero_error() {
        // e_0 rotates (all-plus signs) to the constant vector 1/√64 = 0.125,
        // which sits exactly on a centroid of this 1-bit codebook.
        let d = 64;
        let c = 0.125;
        let cb = Codebook::from_parts(d, 1, vec![-c, c], vec![0.0]).unwrap();
        let mut key = vec![0.0; d];
        key[0] = 3.0;
        let mut scratch = OpCounter::new();
        assert!(fwht(&[1.0; 64], &mut scratch).unwrap()[1..].iter().all(|&v| v == 0.0));
        let set = CalibrationSet::new(Matrix::new(d, key).unwrap(), 0, "fixed point").unwrap();
        assert_eq!(candidate_mse(&set, &SignVector::ones(d), &cb).unwrap(), 0.0);
    }

    #[test]
    fn high_resolution_single_row() {
        let set = gaussian_set(2, 1, 128, 0);
        let cb = solve_codebook(128, 8, 1e-12).unwrap();
        let mse = candidate_mse(&set, &random_signs(128, 1), &cb).unwrap();
        assert!(mse < 1e-4, "{mse}");
    }

    #[test]
    fn homogeneous_keys_track_distortion() {
        let set = gaussian_set(3, 512, 128, 0);
        let cb = solve_codebook(128, 3, 1e-12).unwrap();
        for seed in 1..=5 {
            let mse = candidate_mse(&set, &random_signs(128, seed), &cb).unwrap();
            assert!((mse / cb.distortion() - 1.0).abs() < 0.10, "{mse}");
        }
    }

    #[test]
    fn zero_rows_are_dropped() {
        let mut data = vec![0.0; 3 * 16];
        data[16..32].iter_mut().for_each(|v| *v = 1.0);
        let set = CalibrationSet::new(Matrix::new(16, data).unwrap(), 0, "pad").unwrap();
        let r = select_signs(&set, 3, 2, 0).unwrap();
        assert_eq!(r.dropped_rows, 2);
        assert_eq!(r.calibration_rows, 1);

        let zeros = CalibrationSet::new(Matrix::new(16, vec![0.0; 32]).unwrap(), 0, "z").unwrap();
        assert!(matches!(select_signs(&zeros, 3, 2, 0), Err(Error::EmptyCalibration)));
        let cb = solve_codebook(16, 2, 1e-12).unwrap();
        assert!(matches!(
            candidate_mse(&zeros, &SignVector::ones(16), &cb),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn single_candidate() {
        let set = gaussian_set(4, 8, 32, 0);
        let r = select_signs(&set, 1, 3, 100).unwrap();
        assert_eq!(r.selected_seed, 101);
        assert_eq!(r.spread, 1.0);
        assert!(matches!(select_signs(&set, 0, 3, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn selection_is_argmin_and_reproducible() {
        let set = gaussian_set(5, 32, 64, 0);
        let cb = solve_codebook(64, 2, 1e-12).unwrap();
        let r = select_signs_with_codebook(&set, 40, &cb, 7).unwrap();
        assert!(r.candidate_mse.iter().all(|&m| r.best_mse <= m));
        assert_eq!(r.candidate_seeds, (8..48).collect::<Vec<u64>>());
        let again = candidate_mse(&set, &r.selected_signs, &cb).unwrap();
        assert_eq!(again.to_bits(), r.best_mse.to_bits());
        assert_eq!(select_signs_with_codebook(&set, 40, &cb, 7).unwrap(), r);
        assert!(r.spread >= 1.0);
    }

    #[test]
    fn all_layers_payload_and_order() {
        let layers: Vec<_> = (0..36).map(|l| gaussian_set(100 + l as u64, 4, 128, l)).collect();
        let sel = select_signs_all_layers(&layers, 2, 3, 0).unwrap();
        assert_eq!(sel.payload_len(), 576);

        let single = select_signs_all_layers(&layers[..1], 2, 3, 0).unwrap();
        assert_eq!(single.reports[0], select_signs(&layers[0], 2, 3, 0).unwrap());

        let mut rev = layers[..5].to_vec();
        rev.reverse();
        let fwd = select_signs_all_layers(&layers[..5], 4, 3, 0).unwrap();
        let bwd = select_signs_all_layers(&rev, 4, 3, 0).unwrap();
        for (a, b) in fwd.reports.iter().zip(bwd.reports.iter().rev()) {
            assert_eq!(a, b);
        }

        let mixed = vec![layers[0].clone(), gaussian_set(1, 4, 64, 1)];
        assert!(matches!(
            select_signs_all_layers(&mixed, 2, 3, 0),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn norm_guideline() {
        let mk = |norms: &[f64]| {
            NormDiagnostic::from_mean_norms(
                norms
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| LayerNorm { layer_id: i as u32, mean_norm: n })
                    .collect(),
            )
            .unwrap()
        };
        let d = mk(&[172.0, 22.0]);
        assert!((d.ratio - 7.818).abs() < 1e-3);
        assert_eq!(d.recommendation, Recommendation::OptimizationRecommended);
        assert_eq!(mk(&[5.0, 5.0, 5.0]).ratio, 1.0);
        assert_eq!(mk(&[5.0, 5.0]).recommendation, Recommendation::CalibrationFreeSafe);
        assert_eq!(mk(&[15.0, 10.0]).recommendation, Recommendation::CalibrationFreeSafe);
        assert_eq!(mk(&[30.0, 10.0]).recommendation, Recommendation::Indeterminate);
        assert!(NormDiagnostic::from_mean_norms(vec![]).is_err());
    }
}
