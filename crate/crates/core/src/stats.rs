//! Normal distribution helpers shared by the policy and eval modules.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `Φ(hi) − Φ(lo)` for `lo ≤ hi`, computed from the tail that avoids
/// cancellation.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        // upper tail: Q(lo) − Q(hi)
        0.5 * (libm::erfc(lo * FRAC_1_SQRT_2) - libm::erfc(hi * FRAC_1_SQRT_2))
    } else if hi <= 0.0 {
        normal_cdf(hi) - normal_cdf(lo)
    } else {
        1.0 - normal_cdf(lo) - 0.5 * libm::erfc(hi * FRAC_1_SQRT_2)
    }
}
