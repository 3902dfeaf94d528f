//! Loading and writing artifacts with (d, b) cross-checks.

use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use lutkv::codebook::{deserialize_rom, rom_len, solve_codebook, Codebook, DEFAULT_TOL};
use lutkv::formats::{decode_sign_rom, read_matrix, KvCacheFile};
use lutkv::matrix::Matrix;
use lutkv::signopt::CalibrationSet;
use lutkv::transform::{random_signs, SignVector};
use lutkv::{Error, Result};
use serde::{Deserialize, Serialize};

/// Side file next to a codebook ROM; the ROM itself is bare f16 values.
#[derive(Debug, Serialize, Deserialize)]
pub struct CodebookSidecar {
    pub d: usize,
    pub b: u8,
    pub centroids: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub lloyd_residual: f64,
    pub max_residual: f64,
}

pub fn sidecar_path(rom: &Path) -> PathBuf {
    let mut s = rom.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn conflict(msg: String) -> Error {
    Error::ConfigConflict(msg)
}

/// Fails early when an output cannot be written, before any real work.
pub fn check_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", p.display()),
        ))),
        _ => Ok(()),
    }
}

pub fn check_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

/// Merges a dimension coming from one more source.
pub fn agree(current: Option<usize>, next: Option<usize>, what: &str) -> Result<Option<usize>> {
    match (current, next) {
        (Some(a), Some(b)) if a != b => Err(conflict(format!("{what} has d={b}, expected d={a}"))),
        (a, b) => Ok(a.or(b)),
    }
}

pub fn agree_bits(current: Option<u8>, next: Option<u8>, what: &str) -> Result<Option<u8>> {
    match (current, next) {
        (Some(a), Some(b)) if a != b => Err(conflict(format!("{what} has b={b}, expected b={a}"))),
        (a, b) => Ok(a.or(b)),
    }
}

pub fn rom_bits(path: &Path) -> Result<u8> {
    let len = fs::metadata(path)?.len() as usize;
    (1..=8u8).find(|&b| rom_len(b) == len).ok_or_else(|| {
        Error::Format(format!("{}: {len} bytes is not a codebook ROM size", path.display()))
    })
}

/// Loads a ROM; b comes from its length, d from the sidecar or `d`. The ROM
/// must also match the solved codebook for that d at f16 precision, which
/// catches a ROM built for a different head dimension.
pub fn load_codebook(path: &Path, d: Option<usize>, b: Option<u8>) -> Result<Codebook> {
    check_input(path)?;
    let bits = agree_bits(b, Some(rom_bits(path)?), &path.display().to_string())?.unwrap();
    let side = sidecar_path(path);
    let d = if side.is_file() {
        let sc: CodebookSidecar = serde_json::from_slice(&fs::read(&side)?)
            .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        agree_bits(Some(bits), Some(sc.b), &side.display().to_string())?;
        agree(d, Some(sc.d), &side.display().to_string())?
    } else {
        d
    };
    let d = d.ok_or_else(|| {
        Error::InvalidInput(format!("cannot tell d for {}; pass --d", path.display()))
    })?;
    let cb = deserialize_rom(&fs::read(path)?, d, bits)?;
    let solved = solve_codebook(d, bits, DEFAULT_TOL)?;
    let scale = solved.centroids().last().copied().unwrap_or(1.0);
    let off = cb
        .centroids()
        .iter()
        .zip(solved.centroids())
        .map(|(r, s)| (r - f16::from_f64(*s).to_f64()).abs())
        .fold(0.0, f64::max);
    if off > 0.01 * scale {
        return Err(conflict(format!(
            "{} does not match the {bits}-bit codebook for d={d}",
            path.display()
        )));
    }
    Ok(cb)
}

pub fn load_signs(path: &Path) -> Result<Vec<SignVector>> {
    check_input(path)?;
    decode_sign_rom(&fs::read(path)?)
}

pub fn pick_layer(rom: &[SignVector], layer: u32, path: &Path) -> Result<SignVector> {
    rom.get(layer as usize).cloned().ok_or_else(|| {
        Error::InvalidInput(format!(
            "{} has {} layer(s), layer {layer} requested",
            path.display(),
            rom.len()
        ))
    })
}

/// Signs from a ROM layer or from a seed, with d cross-checked.
pub fn resolve_signs(
    signs: Option<&Path>,
    layer: u32,
    seed: Option<u64>,
    d: Option<usize>,
) -> Result<SignVector> {
    match (signs, seed) {
        (Some(p), _) => {
            let rom = load_signs(p)?;
            let s = pick_layer(&rom, layer, p)?;
            agree(d, Some(s.dim()), &p.display().to_string())?;
            Ok(s)
        }
        (None, Some(seed)) => {
            let d = d.ok_or_else(|| Error::InvalidInput("--seed needs a known d".into()))?;
            Ok(random_signs(d, seed))
        }
        (None, None) => Err(Error::InvalidInput("pass --signs or --seed".into())),
    }
}

pub fn load_cache(path: &Path) -> Result<KvCacheFile> {
    check_input(path)?;
    KvCacheFile::from_bytes(&fs::read(path)?)
}

/// Reads a matrix whose width may be known; a text file's own width wins
/// only when no dimension is known yet.
pub fn load_matrix(path: &Path, d: Option<usize>) -> Result<Matrix> {
    check_input(path)?;
    let m = match read_matrix(path, None) {
        Ok(m) => m,
        Err(Error::Format(_)) if d.is_some() => read_matrix(path, d)?,
        Err(e) => return Err(e),
    };
    if !m.is_empty() {
        agree(d, Some(m.dim()), &path.display().to_string())?;
    }
    Ok(m)
}

pub fn load_layers(paths: &[PathBuf], d: Option<usize>) -> Result<Vec<CalibrationSet>> {
    let mut d = d;
    let mut out = Vec::with_capacity(paths.len());
    for (l, p) in paths.iter().enumerate() {
        let m = load_matrix(p, d)?;
        d = agree(d, Some(m.dim()), &p.display().to_string())?;
        out.push(CalibrationSet::new(m, l as u32, p.display().to_string())?);
    }
    Ok(out)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

/// Pretty JSON to `path`, or stdout when no path is given.
pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    text.push('\n');
    match path {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
