//! Desk-scale evaluation: synthetic key generators, pipeline error metrics,
//! the exp-of-noisy-score bias probe and sign-seed sensitivity sweeps.
//!
//! Rotated-domain MSE and inner-product error stand in for perplexity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{solve_codebook, Codebook, DEFAULT_TOL};
use crate::counter::OpCounter;
use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;
use crate::read_path::score_sequence;
use crate::signopt::{CalibrationSet, UnitRows};
use crate::transform::{random_signs, RotationSpec};
use crate::write_path::{pack, quantize_key_with, ComparatorMode};

/// One synthetic layer. Row = scale/√d · gains ⊙ (z + offsets), z ~ N(0, I),
/// so with unit gains and no offsets the mean row norm is ≈ `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<f64>>,
    /// Persistent per-channel offsets in units of the channel's standard
    /// deviation; these are what let a sign pattern stack outlier energy into
    /// a few rotated coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
}

impl LayerProfile {
    pub fn homogeneous(scale: f64) -> Self {
        Self {
            scale,
            gains: None,
            offsets: None,
        }
    }

    /// The first `channels` coordinates get gain `gain` and offset `offset`.
    pub fn outlier_channels(scale: f64, d: usize, channels: usize, gain: f64, offset: f64) -> Self {
        let gains = (0..d).map(|i| if i < channels { gain } else { 1.0 }).collect();
        let offsets = (0..d).map(|i| if i < channels { offset } else { 0.0 }).collect();
        Self {
            scale,
            gains: Some(gains),
            offsets: Some(offsets),
        }
    }

    /// The heterogeneous layer used by the sensitivity checks: 16 outlier
    /// channels at 7.8× gain carrying a +2σ persistent offset.
    pub fn default_heterogeneous(scale: f64, d: usize) -> Self {
        Self::outlier_channels(scale, d, 16.min(d), 7.8, 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    pub layers: Vec<LayerProfile>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.layers.is_empty() {
            return Err(Error::InvalidInput("synthetic spec needs d, n and at least one layer".into()));
        }
        for (l, p) in self.layers.iter().enumerate() {
            if !(p.scale > 0.0 && p.scale.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {l}: scale must be positive")));
            }
            if let Some(g) = &p.gains {
                check_len(self.d, g.len(), "gain vector")?;
                if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidInput(format!("layer {l}: gains must be positive")));
                }
            }
            if let Some(o) = &p.offsets {
                check_len(self.d, o.len(), "offset vector")?;
                if o.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("layer {l}: offsets must be finite")));
                }
            }
        }
        Ok(())
    }
}

/// One calibration set per layer profile, deterministic in `spec.seed`.
pub fn generate_keys(spec: &SyntheticSpec) -> Result<Vec<CalibrationSet>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    spec.layers
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let mut data = Vec::with_capacity(spec.n * d);
            for _ in 0..spec.n {
                for j in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    let g = p.gains.as_ref().map_or(1.0, |g| g[j]);
                    let o = p.offsets.as_ref().map_or(0.0, |o| o[j]);
                    data.push(p.scale * inv_sqrt_d * g * (z + o));
                }
            }
            CalibrationSet::new(
                Matrix::new(d, data)?,
                l as u32,
                format!("synthetic seed={} layer={l}", spec.seed),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl ErrorStats {
    fn from_samples(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self {
                mean: 0.0,
                p95: 0.0,
                max: 0.0,
            };
        }
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        // Nearest-rank percentile.
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Self {
            mean,
            p95: v[rank - 1],
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub d: usize,
    pub bits: u8,
    pub keys: usize,
    pub queries: usize,
    /// Mean of ‖y − ŷ‖²/d over unit-normalized keys.
    pub rotated_mse: f64,
    /// |score − ⟨q,k⟩| / (‖q‖·‖k‖) over all (query, key) pairs.
    pub inner_product_error: ErrorStats,
    /// Mean over queries of cos(score vector, exact score vector).
    pub score_cosine: f64,
    pub packed_bytes_per_key: usize,
    /// 2d bytes of half-precision storage over the packed record size.
    pub compression_ratio: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Quantizes every key, scores every query through the read path and
/// compares with exact double-precision inner products.
pub fn evaluate_pipeline(
    keys: &Matrix,
    queries: &Matrix,
    spec: &RotationSpec,
    cb: &Codebook,
) -> Result<ErrorReport> {
    let d = spec.dim();
    check_len(d, keys.dim(), "key matrix")?;
    check_len(d, queries.dim(), "query matrix")?;
    check_len(d, cb.dim(), "codebook dimension")?;
    let mut scratch = OpCounter::new();
    let cache = keys
        .rows()
        .map(|k| quantize_key_with(k, spec, cb, ComparatorMode::BinarySearch, &mut scratch))
        .collect::<Result<Vec<_>>>()?;

    let packed: usize = cache.iter().map(|qk| pack(qk, cb.bits()).len()).sum();
    let per_key = if cache.is_empty() {
        crate::write_path::packed_len(d, cb.bits())
    } else {
        packed / cache.len()
    };
    let compression_ratio = if cache.is_empty() {
        (2 * d) as f64 / per_key as f64
    } else {
        (2 * d * cache.len()) as f64 / packed as f64
    };

    let mut mse_sum = 0.0;
    let mut mse_n = 0usize;
    let mut y = vec![0.0; d];
    for (k, qk) in keys.rows().zip(&cache) {
        let n = dot(k, k).sqrt();
        if n == 0.0 {
            continue;
        }
        let unit: Vec<f64> = k.iter().map(|v| v / n).collect();
        spec.rotate_into(&unit, &mut y, &mut scratch)?;
        let err: f64 = y
            .iter()
            .zip(&qk.indices)
            .map(|(v, &i)| (v - cb.centroids()[i as usize]).powi(2))
            .sum();
        mse_sum += err / d as f64;
        mse_n += 1;
    }

    let key_norms: Vec<f64> = keys.rows().map(|k| dot(k, k).sqrt()).collect();
    let mut ip_err = Vec::with_capacity(keys.n_rows() * queries.n_rows());
    let mut cos_sum = 0.0;
    for q in queries.rows() {
        let (approx, _) = score_sequence(q, &cache, spec, cb)?;
        let exact: Vec<f64> = keys.rows().map(|k| dot(q, k)).collect();
        let nq = dot(q, q).sqrt();
        for ((a, e), nk) in approx.iter().zip(&exact).zip(&key_norms) {
            let scale = nq * nk;
            if scale > 0.0 {
                ip_err.push((a - e).abs() / scale);
            }
        }
        cos_sum += cosine(&approx, &exact);
    }

    Ok(ErrorReport {
        d,
        bits: cb.bits(),
        keys: keys.n_rows(),
        queries: queries.n_rows(),
        rotated_mse: if mse_n > 0 { mse_sum / mse_n as f64 } else { 0.0 },
        inner_product_error: ErrorStats::from_samples(ip_err),
        score_cosine: if queries.is_empty() { 1.0 } else { cos_sum / queries.n_rows() as f64 },
        packed_bytes_per_key: per_key,
        compression_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JensenReport {
    pub noise_std: f64,
    pub trials: usize,
    pub seed: u64,
    /// mean_t exp(s_i + ε_t) / exp(s_i), per score.
    pub per_score_ratio: Vec<f64>,
    /// Mean of all sampled ratios.
    pub aggregate_ratio: f64,
    /// Standard error of `aggregate_ratio`.
    pub standard_error: f64,
    /// exp(σ²/2), the lognormal mean.
    pub lognormal_ratio: f64,
    /// Largest |E[softmax(noisy)]_i − softmax(true)_i|.
    pub softmax_max_shift: f64,
    /// Σ_i |E[softmax(noisy)]_i − softmax(true)_i|.
    pub softmax_l1_shift: f64,
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Adds zero-mean Gaussian noise to exact scores and measures the bias that
/// exponentiation introduces, both per score and after softmax.
pub fn jensen_bias_probe(
    true_scores: &[f64],
    noise_std: f64,
    trials: usize,
    seed: u64,
) -> Result<JensenReport> {
    if true_scores.is_empty() {
        return Err(Error::InvalidInput("no scores given".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidInput(format!("noise_std must be >= 0, got {noise_std}")));
    }
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let k = true_scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut ratio_sum = vec![0.0; k];
    let (mut all_sum, mut all_sq) = (0.0, 0.0);
    let mut base = vec![0.0; k];
    softmax_into(true_scores, &mut base);
    let mut noisy = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let mut mean_weights = vec![0.0; k];
    for _ in 0..trials {
        for i in 0..k {
            let eps = if noise_std == 0.0 { 0.0 } else { noise.sample(&mut rng) };
            // exp(s + ε) / exp(s) without overflow.
            let r = eps.exp();
            ratio_sum[i] += r;
            all_sum += r;
            all_sq += r * r;
            noisy[i] = true_scores[i] + eps;
        }
        softmax_into(&noisy, &mut weights);
        for (m, w) in mean_weights.iter_mut().zip(&weights) {
            *m += w;
        }
    }
    let total = (trials * k) as f64;
    let aggregate = all_sum / total;
    let var = if total > 1.0 {
        ((all_sq - total * aggregate * aggregate) / (total - 1.0)).max(0.0)
    } else {
        0.0
    };
    let shifts: Vec<f64> = mean_weights
        .iter()
        .zip(&base)
        .map(|(m, b)| (m / trials as f64 - b).abs())
        .collect();
    Ok(JensenReport {
        noise_std,
        trials,
        seed,
        per_score_ratio: ratio_sum.iter().map(|s| s / trials as f64).collect(),
        aggregate_ratio: aggregate,
        standard_error: (var / total).sqrt(),
        lognormal_ratio: (0.5 * noise_std * noise_std).exp(),
        softmax_max_shift: shifts.iter().copied().fold(0.0, f64::max),
        softmax_l1_shift: shifts.iter().sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpreadStats {
    pub bits: u8,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub max_over_min: f64,
    pub std_over_mean: f64,
}

impl SpreadStats {
    fn from_column(bits: u8, v: &[f64]) -> Self {
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            bits,
            min,
            max,
            mean,
            std,
            max_over_min: if min > 0.0 { max / min } else { 1.0 },
            std_over_mean: if mean > 0.0 { std / mean } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub d: usize,
    pub seeds: Vec<u64>,
    pub bits: Vec<u8>,
    /// mse[s][b]: rotated-domain MSE for seeds[s] at bits[b].
    pub mse: Vec<Vec<f64>>,
    pub spread: Vec<SpreadStats>,
}

/// Rotated-domain MSE for every (seed, bit-width) cell over one key set.
pub fn sensitivity_sweep(keys: &CalibrationSet, seeds: &[u64], bits: &[u8]) -> Result<SweepReport> {
    if seeds.is_empty() || bits.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one seed and one bit-width".into()));
    }
    let d = keys.dim();
    let codebooks = bits
        .iter()
        .map(|&b| solve_codebook(d, b, DEFAULT_TOL))
        .collect::<Result<Vec<_>>>()?;
    let units = UnitRows::from_matrix(keys.keys())?;
    let cells: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..bits.len()).map(move |b| (s, b)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(s, b)| units.qdq_mse(&random_signs(d, seeds[s]), &codebooks[b]))
        .collect::<Result<Vec<f64>>>()?;
    let mse: Vec<Vec<f64>> = values.chunks(bits.len()).map(<[f64]>::to_vec).collect();
    let spread = bits
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let col: Vec<f64> = mse.iter().map(|row| row[j]).collect();
            SpreadStats::from_column(b, &col)
        })
        .collect();
    Ok(SweepReport {
        d,
        seeds: seeds.to_vec(),
        bits: bits.to_vec(),
        mse,
        spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signopt::norm_ratio_diagnostic;
    use crate::write_path::packed_len;

    fn spec(layers: Vec<LayerProfile>, n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            d: 128,
            n,
            layers,
            seed,
        }
    }

    #[test]
    fn generator_norm_ratio() {
        let s = spec(vec![LayerProfile::homogeneous(172.0), LayerProfile::homogeneous(22.0)], 256, 1);
        let sets = generate_keys(&s).unwrap();
        let diag = norm_ratio_diagnostic(&sets).unwrap();
        assert!((diag.ratio - 172.0 / 22.0).abs() < 0.05, "{}", diag.ratio);
        assert!((sets[0].mean_norm() - 172.0).abs() < 2.0);

        let one = generate_keys(&spec(vec![LayerProfile::homogeneous(3.0)], 16, 1)).unwrap();
        assert_eq!(norm_ratio_diagnostic(&one).unwrap().ratio, 1.0);
        assert_eq!(generate_keys(&s).unwrap(), sets);
    }

    #[test]
    fn generator_rejects_bad_profiles() {
        assert!(generate_keys(&spec(vec![LayerProfile::homogeneous(0.0)], 4, 1)).is_err());
        let mut p = LayerProfile::homogeneous(1.0);
        p.gains = Some(vec![1.0; 3]);
        assert!(generate_keys(&spec(vec![p], 4, 1)).is_err());
        assert!(generate_keys(&spec(vec![], 4, 1)).is_err());
    }

    #[test]
    fn compression_ratio_from_bytes() {
        for (d, bits) in [(128usize, 3u8), (64, 2), (128, 4), (32, 1), (16, 8)] {
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            let data = (0..4 * d).map(|_| rng.sample(StandardNormal)).collect();
            let keys = Matrix::new(d, data).unwrap();
            let queries = Matrix::from_rows(d, &[keys.row(0).to_vec()]).unwrap();
            let rot = RotationSpec::new(random_signs(d, 1)).unwrap();
            let cb = solve_codebook(d, bits, 1e-12).unwrap();
            let r = evaluate_pipeline(&keys, &queries, &rot, &cb).unwrap();
            let expected = (2 * d) as f64 / ((d * bits as usize).div_ceil(8) + 2) as f64;
            assert_eq!(r.compression_ratio, expected);
            assert_eq!(r.packed_bytes_per_key, packed_len(d, bits));
        }
    }

    #[test]
    fn repeated_key_scores_identically() {
        let d = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let keys = Matrix::from_rows(d, &vec![k; 10]).unwrap();
        let rot = RotationSpec::new(random_signs(d, 1)).unwrap();
        let cb = solve_codebook(d, 3, 1e-12).unwrap();
        let mut c = OpCounter::new();
        let cache: Vec<_> = keys
            .rows()
            .map(|r| crate::write_path::quantize_key(r, &rot, &cb, &mut c).unwrap())
            .collect();
        let (scores, _) = score_sequence(keys.row(0), &cache, &rot, &cb).unwrap();
        assert!(scores.iter().all(|&s| s.to_bits() == scores[0].to_bits()));
    }

    #[test]
    fn jensen_zero_noise_is_exact() {
        let r = jensen_bias_probe(&[0.3, -1.0, 2.0], 0.0, 1000, 1).unwrap();
        assert_eq!(r.aggregate_ratio, 1.0);
        assert!(r.per_score_ratio.iter().all(|&v| v == 1.0));
        assert!(r.softmax_max_shift < 1e-12);
    }

    #[test]
    fn jensen_monotone_in_noise() {
        let scores = [0.5, 0.1, -0.2, 1.0];
        let ratios: Vec<f64> = [0.0, 0.1, 0.2, 0.5, 1.0]
            .iter()
            .map(|&s| jensen_bias_probe(&scores, s, 20_000, 9).unwrap().aggregate_ratio)
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] >= w[0]), "{ratios:?}");
    }

    #[test]
    fn jensen_rejects_bad_arguments() {
        assert!(jensen_bias_probe(&[], 0.1, 10, 1).is_err());
        assert!(jensen_bias_probe(&[1.0], -0.1, 10, 1).is_err());
        assert!(jensen_bias_probe(&[1.0], 0.1, 0, 1).is_err());
    }

    #[test]
    fn sweep_shapes() {
        let sets = generate_keys(&spec(vec![LayerProfile::homogeneous(1.0)], 32, 4)).unwrap();
        let r = sensitivity_sweep(&sets[0], &[5], &[3]).unwrap();
        assert_eq!(r.mse.len(), 1);
        assert_eq!(r.mse[0].len(), 1);
        assert_eq!(r.spread[0].max_over_min, 1.0);
        let r = sensitivity_sweep(&sets[0], &[1, 2, 3], &[2, 3]).unwrap();
        assert_eq!((r.mse.len(), r.mse[0].len(), r.spread.len()), (3, 2, 2));
        assert!(sensitivity_sweep(&sets[0], &[], &[3]).is_err());
    }

    #[test]
    fn homogeneous_sweep_is_nearly_flat() {
        let sets = generate_keys(&spec(vec![LayerProfile::homogeneous(1.0)], 512, 11)).unwrap();
        let seeds: Vec<u64> = (1..=10).collect();
        let r = sensitivity_sweep(&sets[0], &seeds, &[3]).unwrap();
        assert!(r.spread[0].max_over_min < 1.05, "{}", r.spread[0].max_over_min);
    }
}
