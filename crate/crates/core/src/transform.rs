//! Randomized Hadamard transform R = H_d·diag(s) and its butterfly network.
//!
//! The simulation folds the orthonormal 1/√d factor into the transform output.
//! In hardware that factor is a design-time constant absorbed into the
//! codebook boundaries, so no multiplication is charged for it.

use serde::Serialize;

use crate::counter::{Category, OpCounter};
use crate::error::{check_len, check_pow2, Error, Result};

/// Per-layer ±1 diagonal of the rotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignVector {
    signs: Vec<i8>,
    layer_id: u32,
}

impl SignVector {
    pub fn new(signs: Vec<i8>, layer_id: u32) -> Result<Self> {
        if let Some(pos) = signs.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidInput(format!(
                "sign entry {pos} is {}, expected ±1",
                signs[pos]
            )));
        }
        Ok(Self { signs, layer_id })
    }

    /// All-(+1) signs: the plain Hadamard transform.
    pub fn ones(d: usize) -> Self {
        Self {
            signs: vec![1; d],
            layer_id: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn with_layer_id(mut self, layer_id: u32) -> Self {
        self.layer_id = layer_id;
        self
    }

    /// Packed ROM image: bit i (LSB-first within each byte) is 1 for a −1
    /// sign. `ceil(d / 8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; sign_rom_len(self.dim())];
        for (i, &s) in self.signs.iter().enumerate() {
            if s < 0 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], d: usize, layer_id: u32) -> Result<Self> {
        let expected = sign_rom_len(d);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "sign ROM for d={d} must be {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let signs = (0..d)
            .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { -1 } else { 1 })
            .collect();
        Ok(Self { signs, layer_id })
    }
}

pub fn sign_rom_len(d: usize) -> usize {
    d.div_ceil(8)
}

pub fn serialize_signs(s: &SignVector) -> Vec<u8> {
    s.to_bytes()
}

pub fn deserialize_signs(bytes: &[u8], d: usize) -> Result<SignVector> {
    SignVector::from_bytes(bytes, d, 0)
}

/// SplitMix64, the documented sign generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Deterministic signs for `(d, seed)`: one SplitMix64 draw per 64 signs,
/// bit j of draw w set means sign 64·w + j is −1.
pub fn random_signs(d: usize, seed: u64) -> SignVector {
    let mut rng = SplitMix64::new(seed);
    let mut signs = Vec::with_capacity(d);
    while signs.len() < d {
        let word = rng.next_u64();
        let take = (d - signs.len()).min(64);
        signs.extend((0..take).map(|j| if word >> j & 1 == 1 { -1i8 } else { 1 }));
    }
    SignVector { signs, layer_id: 0 }
}

/// R = H_d·diag(s)/√d for a power-of-two d.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RotationSpec {
    sign: SignVector,
}

impl RotationSpec {
    pub fn new(sign: SignVector) -> Result<Self> {
        check_pow2(sign.dim(), "rotation")?;
        Ok(Self { sign })
    }

    pub fn dim(&self) -> usize {
        self.sign.dim()
    }

    pub fn sign(&self) -> &SignVector {
        &self.sign
    }

    /// Rotates into a caller-provided buffer. Hot path for calibration.
    pub fn rotate_into(&self, x: &[f64], out: &mut [f64], counter: &mut OpCounter) -> Result<()> {
        check_len(self.dim(), x.len(), "rotate input")?;
        check_len(self.dim(), out.len(), "rotate output")?;
        for ((o, &v), &s) in out.iter_mut().zip(x).zip(&self.sign.signs) {
            *o = if s < 0 { -v } else { v };
        }
        fwht_in_place(out, counter)
    }

    /// R⁻¹ = diag(s)·H_d/√d, using that the orthonormal H_d is its own inverse.
    /// Only the conventional reference path reconstructs keys this way.
    pub(crate) fn inverse_rotate(&self, y: &[f64], counter: &mut OpCounter) -> Result<Vec<f64>> {
        check_len(self.dim(), y.len(), "inverse rotate input")?;
        let mut out = y.to_vec();
        fwht_in_place(&mut out, counter)?;
        for (o, &s) in out.iter_mut().zip(&self.sign.signs) {
            if s < 0 {
                *o = -*o;
            }
        }
        Ok(out)
    }
}

/// In-place orthonormal FWHT: log2(d) stages of d/2 add/sub butterflies.
/// Charges d·log2(d) additions and no multiplications to the transform block.
pub fn fwht_in_place(x: &mut [f64], counter: &mut OpCounter) -> Result<()> {
    let d = x.len();
    check_pow2(d, "fwht input")?;
    let mut h = 1;
    while h < d {
        for block in (0..d).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (x[i], x[i + h]);
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (d as f64).sqrt();
    for v in x.iter_mut() {
        *v *= scale;
    }
    counter.adds(Category::Transform, (d * d.trailing_zeros() as usize) as u64);
    Ok(())
}

pub fn fwht(x: &[f64], counter: &mut OpCounter) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    fwht_in_place(&mut out, counter)?;
    Ok(out)
}

/// fwht(x ⊙ s).
pub fn rotate(spec: &RotationSpec, x: &[f64], counter: &mut OpCounter) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.dim()];
    spec.rotate_into(x, &mut out, counter)?;
    Ok(out)
}
