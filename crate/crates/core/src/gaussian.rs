//! Standard normal density, distribution and truncated moments.
//!
//! All tail quantities go through `erfc` so that cells far from the origin
//! keep full relative precision.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Φ(x) = P(Z ≤ x).
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// 1 − Φ(x), accurate for large positive x.
pub fn sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// P(lo ≤ Z ≤ hi) evaluated on the side of the origin that avoids cancellation.
pub fn mass(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        sf(lo) - sf(hi)
    } else if hi <= 0.0 {
        cdf(hi) - cdf(lo)
    } else {
        1.0 - cdf(lo) - sf(hi)
    }
}

/// x·φ(x), with the limit 0 at ±∞.
fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * pdf(x)
    }
}

/// Zeroth, first and second moments of the standard normal over [lo, hi].
pub fn truncated_moments(lo: f64, hi: f64) -> (f64, f64, f64) {
    let m0 = mass(lo, hi);
    let m1 = pdf(lo) - pdf(hi);
    let m2 = m0 + x_pdf(lo) - x_pdf(hi);
    (m0, m1, m2)
}

/// Conditional mean of the standard normal restricted to [lo, hi].
pub fn truncated_mean(lo: f64, hi: f64) -> f64 {
    let (m0, m1, _) = truncated_moments(lo, hi);
    m1 / m0
}

/// Inverse of Φ by bisection. Only used to seed the solver, so robustness
/// matters more than speed.
pub fn quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument {p} outside (0, 1)");
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        // Φ(1) and Φ(-3) to 16 digits.
        assert!((cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-17);
        assert!((sf(8.0) - 6.220_960_574_271_785e-16).abs() < 1e-28);
    }

    #[test]
    fn half_normal_mean() {
        let m = truncated_mean(0.0, f64::INFINITY);
        assert!((m - (2.0 / PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [0.125, 0.25, 0.5, 0.9, 0.999] {
            assert!((cdf(quantile(p)) - p).abs() < 1e-14);
        }
        assert!(quantile(0.5).abs() < 1e-14);
    }

    #[test]
    fn whole_line_moments() {
        let (m0, m1, m2) = truncated_moments(f64::NEG_INFINITY, f64::INFINITY);
        assert_eq!(m0, 1.0);
        assert_eq!(m1, 0.0);
        assert_eq!(m2, 1.0);
    }
}
