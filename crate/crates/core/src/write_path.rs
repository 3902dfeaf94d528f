//! Write datapath: norm extraction, rotation, comparator quantization and
//! packing into fixed-size cache records.

use half::f16;
use serde::Serialize;

use crate::codebook::Codebook;
use crate::counter::{Category, OpCounter};
use crate::error::{check_bits, check_len, Error, Result};
use crate::transform::RotationSpec;

/// One stored key: a b-bit cell index per rotated coordinate plus the
/// half-precision Euclidean norm of the original key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizedKey {
    pub indices: Vec<u8>,
    pub norm: f16,
}

impl QuantizedKey {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }
}

/// How the comparator bank is simulated. Both produce identical indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorMode {
    /// One comparator per boundary, 2^b − 1 per coordinate (the hardware bank).
    #[default]
    Flat,
    /// Fixed-depth binary search, b comparisons per coordinate.
    BinarySearch,
}

/// Cell index of `y`, ties going to the upper cell.
pub fn comparator_index(y: f64, cb: &Codebook, mode: ComparatorMode, counter: &mut OpCounter) -> u8 {
    let boundaries = cb.boundaries();
    match mode {
        ComparatorMode::Flat => {
            counter.compares(Category::Quantize, boundaries.len() as u64);
            boundaries.iter().filter(|&&b| y >= b).count() as u8
        }
        ComparatorMode::BinarySearch => {
            let bits = cb.bits() as u32;
            counter.compares(Category::Quantize, bits as u64);
            let mut lo = 0usize;
            for step in (0..bits).rev() {
                let mid = lo + (1 << step);
                if y >= boundaries[mid - 1] {
                    lo = mid;
                }
            }
            lo as u8
        }
    }
}

/// Quantizes a key with the flat comparator bank.
pub fn quantize_key(
    k: &[f64],
    spec: &RotationSpec,
    cb: &Codebook,
    counter: &mut OpCounter,
) -> Result<QuantizedKey> {
    quantize_key_with(k, spec, cb, ComparatorMode::Flat, counter)
}

pub fn quantize_key_with(
    k: &[f64],
    spec: &RotationSpec,
    cb: &Codebook,
    mode: ComparatorMode,
    counter: &mut OpCounter,
) -> Result<QuantizedKey> {
    let d = spec.dim();
    check_len(d, cb.dim(), "codebook dimension")?;
    check_len(d, k.len(), "key")?;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("key contains non-finite values".into()));
    }

    let sq: f64 = k.iter().map(|v| v * v).sum();
    counter.mults(Category::Norm, d as u64);
    counter.adds(Category::Norm, d.saturating_sub(1) as u64);
    let n = sq.sqrt();
    let norm = f16::from_f64(n);
    if norm.is_infinite() {
        return Err(Error::InvalidInput(format!(
            "key norm {n} exceeds the half-precision range"
        )));
    }

    // The division by the norm is not charged: in hardware it is a rescale of
    // the comparator references, not a datapath multiplier.
    let unit: Vec<f64> = if n > 0.0 {
        k.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; d]
    };
    let mut y = vec![0.0; d];
    spec.rotate_into(&unit, &mut y, counter)?;
    let indices = y
        .iter()
        .map(|&v| comparator_index(v, cb, mode, counter))
        .collect();
    Ok(QuantizedKey { indices, norm })
}

/// Bytes occupied by the packed indices of a d-dimensional key.
pub fn index_bytes(d: usize, bits: u8) -> usize {
    (d * bits as usize).div_ceil(8)
}

/// Size of a packed cache record: indices plus the 2-byte norm.
pub fn packed_len(d: usize, bits: u8) -> usize {
    index_bytes(d, bits) + 2
}

/// Index i occupies bits [b·i, b·i + b) of the index region, LSB-first; the
/// half-precision norm follows as two little-endian bytes.
pub fn pack(qk: &QuantizedKey, bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(qk.dim(), bits)];
    let b = bits as usize;
    for (i, &idx) in qk.indices.iter().enumerate() {
        let start = b * i;
        for bit in 0..b {
            if idx >> bit & 1 == 1 {
                let pos = start + bit;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    let tail = out.len() - 2;
    out[tail..].copy_from_slice(&qk.norm.to_le_bytes());
    out
}

pub fn unpack(bytes: &[u8], d: usize, bits: u8) -> Result<QuantizedKey> {
    check_bits(bits)?;
    let expected = packed_len(d, bits);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "cache record for d={d}, b={bits} must be {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let b = bits as usize;
    let indices = (0..d)
        .map(|i| {
            (0..b).fold(0u8, |acc, bit| {
                let pos = b * i + bit;
                acc | ((bytes[pos / 8] >> (pos % 8) & 1) << bit)
            })
        })
        .collect();
    let norm = f16::from_le_bytes([bytes[expected - 2], bytes[expected - 1]]);
    if !norm.is_finite() || norm.is_sign_negative() && norm != f16::ZERO {
        return Err(Error::CorruptCache(format!("invalid stored norm {norm}")));
    }
    Ok(QuantizedKey { indices, norm })
}

/// Conventional reconstruction R⁻¹·codebook[idx]·‖k‖.
///
/// Used only by the reference scoring path; the table-lookup read path never
/// reconstructs keys. Charges the inverse FWHT additions to the transform
/// block and the d norm-scaling multiplications to the norm block.
pub fn dequantize_key(
    qk: &QuantizedKey,
    spec: &RotationSpec,
    cb: &Codebook,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    let d = spec.dim();
    check_len(d, qk.dim(), "quantized key")?;
    check_len(d, cb.dim(), "codebook dimension")?;
    let centroids = cb.centroids();
    let rotated = qk
        .indices
        .iter()
        .map(|&i| {
            centroids.get(i as usize).copied().ok_or_else(|| {
                Error::CorruptCache(format!("index {i} out of range for {}-bit codebook", cb.bits()))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut k = spec.inverse_rotate(&rotated, counter)?;
    let n = qk.norm.to_f64();
    for v in k.iter_mut() {
        *v *= n;
    }
    counter.mults(Category::Norm, d as u64);
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::solve_codebook;
    use crate::transform::{random_signs, SignVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn setup(d: usize, bits: u8) -> (RotationSpec, Codebook) {
        (
            RotationSpec::new(random_signs(d, 1)).unwrap(),
            solve_codebook(d, bits, 1e-12).unwrap(),
        )
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn fifty_byte_records() {
        let (spec, cb) = setup(128, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k: Vec<f64> = (0..128).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let mut c = OpCounter::new();
        let qk = quantize_key(&k, &spec, &cb, &mut c).unwrap();
        assert_eq!(pack(&qk, 3).len(), 50);
        assert_eq!(packed_len(128, 3), 50);
    }

    #[test]
    fn counts_per_block() {
        let (spec, cb) = setup(128, 3);
        let k = vec![0.25; 128];
        let mut flat = OpCounter::new();
        let a = quantize_key_with(&k, &spec, &cb, ComparatorMode::Flat, &mut flat).unwrap();
        let mut bin = OpCounter::new();
        let b = quantize_key_with(&k, &spec, &cb, ComparatorMode::BinarySearch, &mut bin).unwrap();
        assert_eq!(a, b);
        assert_eq!(flat.get(Category::Quantize).comparisons, 896);
        assert_eq!(bin.get(Category::Quantize).comparisons, 128 * 3);
        for c in [&flat, &bin] {
            assert_eq!(c.get(Category::Transform).multiplications, 0);
            assert_eq!(c.get(Category::Quantize).multiplications, 0);
            assert_eq!(c.get(Category::Norm).multiplications, 128);
        }
    }

    #[test]
    fn zero_key_maps_to_center_cell() {
        for bits in 1..=4 {
            let (spec, cb) = setup(64, bits);
            let mut c = OpCounter::new();
            let qk = quantize_key(&[0.0; 64], &spec, &cb, &mut c).unwrap();
            assert!(qk.indices.iter().all(|&i| i == 1 << (bits - 1)));
            assert_eq!(qk.norm, f16::ZERO);
            let back = dequantize_key(&qk, &spec, &cb, &mut c).unwrap();
            assert!(back.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn boundary_values_take_upper_cell() {
        let cb = solve_codebook(128, 3, 1e-12).unwrap();
        let mut c = OpCounter::new();
        for mode in [ComparatorMode::Flat, ComparatorMode::BinarySearch] {
            for (j, &b) in cb.boundaries().iter().enumerate() {
                assert_eq!(comparator_index(b, &cb, mode, &mut c) as usize, j + 1);
                assert_eq!(comparator_index(b.next_down(), &cb, mode, &mut c) as usize, j);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let (spec, cb) = setup(16, 2);
        let mut c = OpCounter::new();
        let mut k = vec![1.0; 16];
        k[3] = f64::NAN;
        assert!(matches!(quantize_key(&k, &spec, &cb, &mut c), Err(Error::InvalidInput(_))));
        assert!(matches!(
            quantize_key(&[1.0; 8], &spec, &cb, &mut c),
            Err(Error::InvalidDimension(_))
        ));
        assert!(matches!(unpack(&[0u8; 49], 128, 3), Err(Error::Format(_))));
    }

    #[test]
    fn zero_indices_pack_layout() {
        let qk = QuantizedKey {
            indices: vec![0; 128],
            norm: f16::ONE,
        };
        let bytes = pack(&qk, 3);
        assert!(bytes[..48].iter().all(|&b| b == 0));
        assert_eq!(&bytes[48..], &f16::ONE.to_le_bytes());
        // First three indices 1, 2, 7 occupy bits 0..9 LSB-first.
        let mut qk = qk;
        qk.indices[0] = 1;
        qk.indices[1] = 2;
        qk.indices[2] = 7;
        let bytes = pack(&qk, 3);
        assert_eq!(bytes[0], 0b1101_0001);
        assert_eq!(bytes[1], 0b0000_0001);
    }

    #[test]
    fn high_resolution_reconstruction() {
        let (spec, cb) = setup(128, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = OpCounter::new();
        for _ in 0..50 {
            let k = unit(&mut rng, 128);
            let qk = quantize_key(&k, &spec, &cb, &mut c).unwrap();
            let back = dequantize_key(&qk, &spec, &cb, &mut c).unwrap();
            let err = k.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err < 0.05, "relative error {err}");
        }
    }

    #[test]
    fn dequantized_norm_is_stored_norm_times_centroid_norm() {
        let (spec, cb) = setup(128, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = OpCounter::new();
        for _ in 0..20 {
            let k: Vec<f64> = unit(&mut rng, 128).iter().map(|v| v * 4.5).collect();
            let qk = quantize_key(&k, &spec, &cb, &mut c).unwrap();
            let cvec_norm = qk
                .indices
                .iter()
                .map(|&i| cb.centroids()[i as usize].powi(2))
                .sum::<f64>()
                .sqrt();
            let back = dequantize_key(&qk, &spec, &cb, &mut c).unwrap();
            let bn = back.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((bn - qk.norm.to_f64() * cvec_norm).abs() < 1e-12 * bn);
            // The centroid vector approximates a unit vector up to quantization error.
            assert!((cvec_norm - 1.0).abs() < 0.1, "{cvec_norm}");
        }
    }

    #[test]
    fn rotated_domain_mse_matches_distortion() {
        let (spec, cb) = setup(128, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut c = OpCounter::new();
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let k = unit(&mut rng, 128);
            let y = crate::transform::rotate(&spec, &k, &mut c).unwrap();
            let qk = quantize_key_with(&k, &spec, &cb, ComparatorMode::BinarySearch, &mut c).unwrap();
            total += y
                .iter()
                .zip(&qk.indices)
                .map(|(v, &i)| (v - cb.centroids()[i as usize]).powi(2))
                .sum::<f64>()
                / 128.0;
        }
        let mse = total / n as f64;
        let rel = (mse / cb.distortion() - 1.0).abs();
        assert!(rel < 0.05, "mse {mse} vs {}", cb.distortion());
    }

    #[test]
    fn sign_flips_do_not_change_zero_counts() {
        let spec = RotationSpec::new(SignVector::ones(32)).unwrap();
        let cb = solve_codebook(32, 2, 1e-12).unwrap();
        let mut c = OpCounter::new();
        quantize_key(&[1.0; 32], &spec, &cb, &mut c).unwrap();
        assert_eq!(c.get(Category::Transform).additions, 32 * 5);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(
            bits in 1u8..=8,
            log_d in 1u32..9,
            seed in any::<u64>(),
            norm in 0.0f32..60000.0,
        ) {
            let d = 1usize << log_d;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let indices = (0..d).map(|_| rng.random_range(0..(1u16 << bits)) as u8).collect();
            let qk = QuantizedKey { indices, norm: f16::from_f32(norm) };
            let bytes = pack(&qk, bits);
            prop_assert_eq!(bytes.len(), packed_len(d, bits));
            prop_assert_eq!(unpack(&bytes, d, bits).unwrap(), qk);
        }

        #[test]
        fn comparator_modes_agree_and_are_monotone(
            bits in 1u8..=6,
            a in -0.5f64..0.5,
            b in -0.5f64..0.5,
        ) {
            let cb = solve_codebook(64, bits, 1e-12).unwrap();
            let mut c = OpCounter::new();
            for y in [a, b] {
                let f = comparator_index(y, &cb, ComparatorMode::Flat, &mut c);
                let s = comparator_index(y, &cb, ComparatorMode::BinarySearch, &mut c);
                prop_assert_eq!(f, s);
                prop_assert_eq!(f, cb.cell_index(y));
            }
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cb.cell_index(lo) <= cb.cell_index(hi));
        }
    }
}
