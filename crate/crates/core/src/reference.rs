//! Conventional scoring path, kept only as an oracle for the read path.
//!
//! Every stored key is reconstructed (centroid lookup, inverse rotation, norm
//! scaling) and dotted with the unrotated query: T·d score multiplications
//! plus an inverse transform per key.

use crate::codebook::Codebook;
use crate::counter::{Category, OpCounter};
use crate::error::{check_len, Result};
use crate::transform::RotationSpec;
use crate::write_path::{dequantize_key, QuantizedKey};

pub fn score_sequence_reference(
    q: &[f64],
    cache: &[QuantizedKey],
    spec: &RotationSpec,
    cb: &Codebook,
) -> Result<(Vec<f64>, OpCounter)> {
    let d = spec.dim();
    check_len(d, q.len(), "query")?;
    let mut counter = OpCounter::new();
    let scores = cache
        .iter()
        .map(|qk| {
            let k = dequantize_key(qk, spec, cb, &mut counter)?;
            counter.mults(Category::Score, d as u64);
            counter.adds(Category::Score, d.saturating_sub(1) as u64);
            Ok(q.iter().zip(&k).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((scores, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::solve_codebook;
    use crate::read_path::score_sequence;
    use crate::transform::random_signs;
    use crate::write_path::quantize_key;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn conventional_count_is_t_times_d() {
        let spec = RotationSpec::new(random_signs(128, 1)).unwrap();
        let cb = solve_codebook(128, 3, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = OpCounter::new();
        let cache: Vec<_> = (0..64)
            .map(|_| quantize_key(&gaussian(&mut rng, 128), &spec, &cb, &mut c).unwrap())
            .collect();
        let (_, counter) = score_sequence_reference(&gaussian(&mut rng, 128), &cache, &spec, &cb).unwrap();
        assert_eq!(counter.get(Category::Score).multiplications, 64 * 128);
        assert_eq!(counter.get(Category::Transform).additions, 64 * 128 * 7);
        assert_eq!(counter.get(Category::Table).multiplications, 0);
    }

    #[test]
    fn high_resolution_reference_tracks_exact_inner_product() {
        let spec = RotationSpec::new(random_signs(128, 2)).unwrap();
        let cb = solve_codebook(128, 8, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = OpCounter::new();
        let q = gaussian(&mut rng, 128);
        let k = gaussian(&mut rng, 128);
        let qk = quantize_key(&k, &spec, &cb, &mut c).unwrap();
        let (s, _) = score_sequence_reference(&q, &[qk], &spec, &cb).unwrap();
        let exact: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nk = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        // 8-bit rotated-domain error is ~1% of the vector norm.
        assert!((s[0] - exact).abs() < 0.05 * nq * nk, "{} vs {exact}", s[0]);
    }

    #[test]
    fn agrees_with_lookup_path() {
        let spec = RotationSpec::new(random_signs(64, 9)).unwrap();
        let cb = solve_codebook(64, 2, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = OpCounter::new();
        let q = gaussian(&mut rng, 64);
        let cache: Vec<_> = (0..32)
            .map(|_| quantize_key(&gaussian(&mut rng, 64), &spec, &cb, &mut c).unwrap())
            .collect();
        let (a, _) = score_sequence(&q, &cache, &spec, &cb).unwrap();
        let (b, _) = score_sequence_reference(&q, &cache, &spec, &cb).unwrap();
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        for ((x, y), qk) in a.iter().zip(&b).zip(&cache) {
            assert!((x - y).abs() <= 1e-12 * nq * qk.norm.to_f64());
        }
    }
}
