//! On-disk artifacts.
//!
//! | file       | layout                                                              |
//! |------------|---------------------------------------------------------------------|
//! | `.cbrom`   | raw codebook ROM image, see [`crate::codebook::serialize_rom`]      |
//! | `.sgnrom`  | `"SGN"`, version, d (u16), layers (u16), then one sign record/layer |
//! | `.kvq`     | `"KVQ"`, version, d (u16), b, reserved, T (u32), layer (u32), records |
//! | key matrix | row-major f64 little-endian, or text with one row per line          |
//!
//! All multi-byte integers are little-endian.

use std::path::Path;

use crate::error::{check_bits, check_pow2, Error, Result};
use crate::matrix::Matrix;
use crate::transform::{sign_rom_len, SignVector};
use crate::write_path::{pack, packed_len, unpack, QuantizedKey};

pub const FORMAT_VERSION: u8 = 1;

const SGN_MAGIC: &[u8; 3] = b"SGN";
pub const SGN_HEADER_LEN: usize = 8;

const KVQ_MAGIC: &[u8; 3] = b"KVQ";
pub const KVQ_HEADER_LEN: usize = 16;

/// Multi-layer sign ROM: record l holds the signs of layer l.
pub fn encode_sign_rom(layers: &[SignVector]) -> Result<Vec<u8>> {
    let d = layers.first().map(SignVector::dim).unwrap_or(0);
    if layers.iter().any(|s| s.dim() != d) {
        return Err(Error::InvalidDimension("sign vectors differ in length".into()));
    }
    let d16 = u16::try_from(d)
        .map_err(|_| Error::InvalidDimension(format!("d={d} does not fit the sign ROM header")))?;
    let count = u16::try_from(layers.len())
        .map_err(|_| Error::InvalidInput(format!("{} layers exceed the header", layers.len())))?;
    let mut out = Vec::with_capacity(SGN_HEADER_LEN + layers.len() * sign_rom_len(d));
    out.extend_from_slice(SGN_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&d16.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for s in layers {
        out.extend_from_slice(&s.to_bytes());
    }
    Ok(out)
}

pub fn decode_sign_rom(bytes: &[u8]) -> Result<Vec<SignVector>> {
    if bytes.len() < SGN_HEADER_LEN || &bytes[..3] != SGN_MAGIC {
        return Err(Error::Format("not a sign ROM file (bad magic)".into()));
    }
    if bytes[3] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported sign ROM version {}", bytes[3])));
    }
    let d = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let rec = sign_rom_len(d);
    let payload = &bytes[SGN_HEADER_LEN..];
    if payload.len() != rec * count {
        return Err(Error::Format(format!(
            "sign ROM payload is {} bytes, header implies {count} × {rec}",
            payload.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    payload
        .chunks_exact(rec)
        .enumerate()
        .map(|(l, chunk)| SignVector::from_bytes(chunk, d, l as u32))
        .collect()
}

/// A quantized key cache for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheFile {
    pub d: usize,
    pub bits: u8,
    pub layer_id: u32,
    pub keys: Vec<QuantizedKey>,
}

impl KvCacheFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_bits(self.bits)?;
        let d16 = u16::try_from(self.d)
            .map_err(|_| Error::InvalidDimension(format!("d={} does not fit the cache header", self.d)))?;
        let t = u32::try_from(self.keys.len())
            .map_err(|_| Error::InvalidInput("too many cache records".into()))?;
        let rec = packed_len(self.d, self.bits);
        let mut out = Vec::with_capacity(KVQ_HEADER_LEN + rec * self.keys.len());
        out.extend_from_slice(KVQ_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&d16.to_le_bytes());
        out.push(self.bits);
        out.push(0);
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        for (i, qk) in self.keys.iter().enumerate() {
            if qk.dim() != self.d {
                return Err(Error::InvalidDimension(format!(
                    "cache record {i} has {} indices, header says {}",
                    qk.dim(),
                    self.d
                )));
            }
            out.extend_from_slice(&pack(qk, self.bits));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < KVQ_HEADER_LEN || &bytes[..3] != KVQ_MAGIC {
            return Err(Error::Format("not a KV cache file (bad magic)".into()));
        }
        if bytes[3] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported cache version {}", bytes[3])));
        }
        let d = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let bits = bytes[6];
        check_bits(bits).map_err(|_| Error::Format(format!("invalid bit-width {bits} in header")))?;
        check_pow2(d, "cache header dimension").map_err(|e| Error::Format(e.to_string()))?;
        let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let layer_id = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let rec = packed_len(d, bits);
        let body = &bytes[KVQ_HEADER_LEN..];
        if body.len() != rec * t {
            return Err(Error::Format(format!(
                "cache body is {} bytes, header implies {t} × {rec}",
                body.len()
            )));
        }
        let keys = body
            .chunks_exact(rec)
            .map(|c| unpack(c, d, bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d,
            bits,
            layer_id,
            keys,
        })
    }
}

fn is_text(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("txt" | "csv" | "tsv")
    )
}

/// Parses a textual matrix: one row per line, values separated by commas or
/// whitespace; blank lines and `#` comments are skipped.
pub fn parse_matrix_text(text: &str, d: Option<usize>) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {t:?}: {e}", ln + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let d = match (d, rows.first()) {
        (Some(d), _) => d,
        (None, Some(r)) => r.len(),
        (None, None) => {
            return Err(Error::Format("empty matrix file needs an explicit dimension".into()))
        }
    };
    Matrix::from_rows(d, &rows).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_matrix_binary(bytes: &[u8], d: usize) -> Result<Matrix> {
    if d == 0 || !bytes.len().is_multiple_of(8 * d) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {d}-wide f64 rows",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(d, data)
}

/// Reads a key or query matrix; `.txt`/`.csv`/`.tsv` are textual, anything
/// else is raw little-endian f64 and needs `d`.
pub fn read_matrix(path: &Path, d: Option<usize>) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    if is_text(path) {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.display())))?;
        parse_matrix_text(&text, d)
    } else {
        let d = d.ok_or_else(|| {
            Error::Format(format!("binary matrix {} needs an explicit dimension", path.display()))
        })?;
        parse_matrix_binary(&bytes, d)
    }
}

pub fn matrix_to_binary(m: &Matrix) -> Vec<u8> {
    m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::random_signs;
    use half::f16;
    use proptest::prelude::*;

    #[test]
    fn sign_rom_36_layers() {
        let layers: Vec<_> = (0..36).map(|l| random_signs(128, l)).collect();
        let bytes = encode_sign_rom(&layers).unwrap();
        assert_eq!(bytes.len(), SGN_HEADER_LEN + 576);
        let back = decode_sign_rom(&bytes).unwrap();
        assert_eq!(back.len(), 36);
        for (l, (a, b)) in layers.iter().zip(&back).enumerate() {
            assert_eq!(a.signs(), b.signs());
            assert_eq!(b.layer_id(), l as u32);
        }
    }

    #[test]
    fn sign_rom_rejects_damage() {
        let bytes = encode_sign_rom(&[random_signs(128, 1)]).unwrap();
        assert!(matches!(decode_sign_rom(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sign_rom(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[3] = 9;
        assert!(matches!(decode_sign_rom(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn empty_cache_has_valid_header() {
        let f = KvCacheFile {
            d: 128,
            bits: 3,
            layer_id: 4,
            keys: vec![],
        };
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes.len(), KVQ_HEADER_LEN);
        assert_eq!(KvCacheFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn cache_rejects_damage() {
        let f = KvCacheFile {
            d: 128,
            bits: 3,
            layer_id: 0,
            keys: vec![QuantizedKey {
                indices: vec![5; 128],
                norm: f16::from_f32(2.5),
            }],
        };
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes.len(), KVQ_HEADER_LEN + 50);
        assert!(matches!(KvCacheFile::from_bytes(&bytes[..60]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[6] = 0;
        assert!(matches!(KvCacheFile::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn text_matrix() {
        let m = parse_matrix_text("# keys\n1, 2, 3, 4\n\n5 6 7 8\n", None).unwrap();
        assert_eq!((m.n_rows(), m.dim()), (2, 4));
        assert_eq!(m.row(1), &[5.0, 6.0, 7.0, 8.0]);
        assert!(parse_matrix_text("1 2\n3\n", None).is_err());
        assert!(parse_matrix_text("", None).is_err());
        assert_eq!(parse_matrix_text("", Some(8)).unwrap().n_rows(), 0);
        assert!(matches!(parse_matrix_text("1 x\n", None), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn cache_round_trip(seed in any::<u64>(), t in 0usize..6, bits in 1u8..=8) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let keys = (0..t).map(|_| QuantizedKey {
                indices: (0..64).map(|_| rng.random_range(0..(1u16 << bits)) as u8).collect(),
                norm: f16::from_f32(rng.random_range(0.0f32..100.0)),
            }).collect();
            let f = KvCacheFile { d: 64, bits, layer_id: rng.random(), keys };
            let back = KvCacheFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn binary_matrix_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 0..10)) {
            let data: Vec<f64> = vals.iter().flat_map(|v| [*v, -*v]).collect();
            let m = Matrix::new(2, data).unwrap();
            prop_assert_eq!(parse_matrix_binary(&matrix_to_binary(&m), 2).unwrap(), m);
        }
    }
}
