//! Design-time fixed Lloyd-Max codebook for the N(0, 1/d) coordinate law.
//!
//! After a randomized Hadamard rotation every coordinate of a unit vector is
//! approximately N(0, 1/d), so the MSE-optimal scalar quantizer depends only
//! on the dimension and the bit-width. The solver here alternates the two
//! optimality conditions (centroid = conditional cell mean, boundary =
//! midpoint of neighbouring centroids) in double precision. Half-precision
//! rounding happens only when the codebook is written to its ROM image.

use half::f16;
use serde::Serialize;

use crate::error::{check_bits, check_pow2, Error, Result};
use crate::gaussian;

/// Alternation cap for the fixed-point solve.
pub const MAX_ITERATIONS: usize = 10_000;

/// Default convergence threshold used by the CLI and the sign optimizer.
pub const DEFAULT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Codebook {
    d: usize,
    bits: u8,
    centroids: Vec<f64>,
    boundaries: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook from explicit values, checking shape, ordering and
    /// interleaving.
    pub fn from_parts(
        d: usize,
        bits: u8,
        centroids: Vec<f64>,
        boundaries: Vec<f64>,
    ) -> Result<Self> {
        check_pow2(d, "codebook dimension")?;
        check_bits(bits)?;
        let levels = 1usize << bits;
        if centroids.len() != levels || boundaries.len() != levels - 1 {
            return Err(Error::InvalidInput(format!(
                "{}-bit codebook needs {} centroids and {} boundaries, got {} and {}",
                bits,
                levels,
                levels - 1,
                centroids.len(),
                boundaries.len()
            )));
        }
        validate_order(&centroids, &boundaries).map_err(Error::InvalidInput)?;
        Ok(Self {
            d,
            bits,
            centroids,
            boundaries,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Standard deviation of the source law, 1/√d.
    pub fn sigma(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    /// Cell containing `y`; a value equal to a boundary belongs to the upper
    /// cell. Uncounted fast path; the write path has the instrumented
    /// comparator banks.
    #[inline]
    pub fn cell_index(&self, y: f64) -> u8 {
        self.boundaries.partition_point(|&b| b <= y) as u8
    }

    /// Worst deviation of a boundary from the midpoint of its neighbours.
    pub fn lloyd_residual(&self) -> f64 {
        lloyd_residual(&self.centroids, &self.boundaries)
    }

    /// Worst deviation of a centroid from the conditional mean of its cell.
    pub fn max_residual(&self) -> f64 {
        max_residual(self.sigma(), &self.centroids, &self.boundaries)
    }

    /// Expected squared error per coordinate for X ~ N(0, 1/d), in closed form.
    pub fn distortion(&self) -> f64 {
        let sigma = self.sigma();
        let edges = cell_edges(&self.boundaries, sigma);
        self.centroids
            .iter()
            .zip(edges.windows(2))
            .map(|(&c, e)| {
                let (m0, m1, m2) = gaussian::truncated_moments(e[0], e[1]);
                let cs = c / sigma;
                sigma * sigma * (m2 - 2.0 * cs * m1 + cs * cs * m0)
            })
            .sum()
    }
}

/// Solves the Lloyd-Max quantizer for N(0, 1/d) at `bits` bits.
pub fn solve_codebook(d: usize, bits: u8, tol: f64) -> Result<Codebook> {
    check_pow2(d, "codebook dimension")?;
    if d < 2 {
        return Err(Error::InvalidDimension(format!(
            "codebook dimension must be at least 2, got {d}"
        )));
    }
    check_bits(bits)?;
    let sigma = 1.0 / (d as f64).sqrt();
    let (centroids, boundaries) = lloyd_max_gaussian(sigma, bits, tol)?;
    Ok(Codebook {
        d,
        bits,
        centroids,
        boundaries,
    })
}

/// Lloyd-Max centroids and boundaries for N(0, sigma²).
///
/// Starts from the Gaussian quantiles j/2^b and alternates the centroid and
/// boundary updates. Plain alternation converges linearly with a rate close
/// to 1 at high bit-widths, so once the updates are small the boundary step
/// switches to Newton's method on the fixed-point equations (the Jacobian is
/// tridiagonal). Iteration stops when no parameter moves by more than
/// `tol / 10` and both optimality residuals are below `tol`.
pub fn lloyd_max_gaussian(sigma: f64, bits: u8, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    solve_with_cap(sigma, bits, tol, MAX_ITERATIONS)
}

fn solve_with_cap(
    sigma: f64,
    bits: u8,
    tol: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_bits(bits)?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let levels = 1usize << bits;
    let mut boundaries: Vec<f64> = (1..levels)
        .map(|j| sigma * gaussian::quantile(j as f64 / levels as f64))
        .collect();
    symmetrize(&mut boundaries);
    let mut centroids = conditional_means(sigma, &boundaries);
    let mut residual = f64::INFINITY;
    let mut delta = f64::INFINITY;

    for _ in 0..max_iterations {
        let mut next = if delta < NEWTON_SWITCH * sigma {
            newton_step(sigma, &boundaries, &centroids)
                .unwrap_or_else(|| midpoints(&centroids))
        } else {
            midpoints(&centroids)
        };
        symmetrize(&mut next);
        let next_centroids = conditional_means(sigma, &next);

        delta = max_abs_diff(&boundaries, &next).max(max_abs_diff(&centroids, &next_centroids));
        boundaries = next;
        centroids = next_centroids;

        if delta < tol / 10.0 {
            // Settle the boundaries on the final centroids so the midpoint
            // condition holds to rounding.
            let mut settled = midpoints(&centroids);
            symmetrize(&mut settled);
            residual = lloyd_residual(&centroids, &settled)
                .max(max_residual(sigma, &centroids, &settled));
            if residual < tol {
                return Ok((centroids, settled));
            }
        }
    }
    if residual.is_infinite() {
        residual = lloyd_residual(&centroids, &boundaries)
            .max(max_residual(sigma, &centroids, &boundaries));
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
        residual,
    })
}

/// Alternation step size (in units of sigma) below which Newton takes over.
const NEWTON_SWITCH: f64 = 1e-4;

fn midpoints(centroids: &[f64]) -> Vec<f64> {
    centroids.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// One Newton step on F(t) = t − midpoints(c(t)). Returns `None` if the step
/// would break the ordering of the boundaries.
fn newton_step(sigma: f64, boundaries: &[f64], centroids: &[f64]) -> Option<Vec<f64>> {
    let n = boundaries.len();
    let edges = cell_edges(boundaries, sigma);
    // dlo[j], dhi[j]: sensitivity of centroid j to its lower / upper edge.
    let mut dlo = vec![0.0; n + 1];
    let mut dhi = vec![0.0; n + 1];
    for j in 0..=n {
        let (a, c) = (edges[j], edges[j + 1]);
        let (m0, m1, _) = gaussian::truncated_moments(a, c);
        let m = m1 / m0;
        if a.is_finite() {
            dlo[j] = gaussian::pdf(a) * (m - a) / m0;
        }
        if c.is_finite() {
            dhi[j] = gaussian::pdf(c) * (c - m) / m0;
        }
    }
    let mut diag = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for j in 0..n {
        diag[j] = 1.0 - 0.5 * (dhi[j] + dlo[j + 1]);
        if j > 0 {
            lower[j] = -0.5 * dlo[j];
        }
        if j + 1 < n {
            upper[j] = -0.5 * dhi[j + 1];
        }
        rhs[j] = boundaries[j] - 0.5 * (centroids[j] + centroids[j + 1]);
    }
    let step = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let next: Vec<f64> = boundaries.iter().zip(&step).map(|(t, s)| t - s).collect();
    let ordered = next.windows(2).all(|w| w[0] < w[1]) && next.iter().all(|v| v.is_finite());
    ordered.then_some(next)
}

/// Thomas algorithm; `None` on a vanishing pivot.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot.abs() < 1e-300 {
        return None;
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot.abs() < 1e-300 {
            return None;
        }
        c[i] = upper[i] / pivot;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// Byte length of the ROM image: 2^(b+1) − 1 half-precision values.
pub fn rom_len(bits: u8) -> usize {
    ((1usize << (bits as usize + 1)) - 1) * 2
}

/// ROM image: centroids then boundaries, each as a little-endian IEEE-754
/// half rounded to nearest even.
pub fn serialize_rom(cb: &Codebook) -> Vec<u8> {
    cb.centroids
        .iter()
        .chain(cb.boundaries.iter())
        .flat_map(|&v| f16::from_f64(v).to_le_bytes())
        .collect()
}

pub fn deserialize_rom(bytes: &[u8], d: usize, bits: u8) -> Result<Codebook> {
    check_pow2(d, "codebook dimension")?;
    check_bits(bits)?;
    let expected = rom_len(bits);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{bits}-bit codebook ROM must be {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
        .collect();
    let levels = 1usize << bits;
    let (centroids, boundaries) = values.split_at(levels);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptRom("non-finite value".into()));
    }
    validate_order(centroids, boundaries).map_err(Error::CorruptRom)?;
    Ok(Codebook {
        d,
        bits,
        centroids: centroids.to_vec(),
        boundaries: boundaries.to_vec(),
    })
}

fn validate_order(centroids: &[f64], boundaries: &[f64]) -> std::result::Result<(), String> {
    for (j, b) in boundaries.iter().enumerate() {
        let (lo, hi) = (centroids[j], centroids[j + 1]);
        if !(lo < *b && *b < hi) {
            return Err(format!(
                "boundary {j} ({b}) does not lie strictly between centroids {lo} and {hi}"
            ));
        }
    }
    Ok(())
}

/// Cell edges in standard-normal units, including ±∞.
fn cell_edges(boundaries: &[f64], sigma: f64) -> Vec<f64> {
    std::iter::once(f64::NEG_INFINITY)
        .chain(boundaries.iter().map(|b| b / sigma))
        .chain(std::iter::once(f64::INFINITY))
        .collect()
}

fn conditional_means(sigma: f64, boundaries: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = cell_edges(boundaries, sigma)
        .windows(2)
        .map(|e| sigma * gaussian::truncated_mean(e[0], e[1]))
        .collect();
    symmetrize(&mut c);
    c
}

fn lloyd_residual(centroids: &[f64], boundaries: &[f64]) -> f64 {
    boundaries
        .iter()
        .zip(centroids.windows(2))
        .map(|(b, w)| (b - 0.5 * (w[0] + w[1])).abs())
        .fold(0.0, f64::max)
}

fn max_residual(sigma: f64, centroids: &[f64], boundaries: &[f64]) -> f64 {
    cell_edges(boundaries, sigma)
        .windows(2)
        .zip(centroids)
        .map(|(e, c)| (c - sigma * gaussian::truncated_mean(e[0], e[1])).abs())
        .fold(0.0, f64::max)
}

/// Forces exact antisymmetry about zero; for an odd count the middle entry
/// becomes exactly 0.
fn symmetrize(v: &mut [f64]) {
    let n = v.len();
    for j in 0..n / 2 {
        let m = 0.5 * (v[n - 1 - j] - v[j]);
        v[j] = -m;
        v[n - 1 - j] = m;
    }
    if n % 2 == 1 {
        v[n / 2] = 0.0;
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
