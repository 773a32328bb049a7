//! Log-gamma, digamma and the Beta density.
//!
//! The checked entry points reject non-finite and non-positive arguments
//! instead of returning NaN. The `*_unchecked` variants are for hot loops
//! whose callers already hold the invariant (Beta parameters are always ≥ 1).

use crate::error::{Error, Result};

/// A finite, strictly positive real.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PositiveReal(f64);

impl PositiveReal {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(PositiveReal(value))
        } else {
            Err(Error::Domain(format!(
                "expected a finite positive real, got {value}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PositiveReal {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        PositiveReal::new(value)
    }
}

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

// ln(sqrt(2π))
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// ln Γ(x) for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    let x = PositiveReal::new(x)?;
    Ok(log_gamma_unchecked(x.get()))
}

pub fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x) = Γ(x + 1) / x keeps the Lanczos sum in its accurate range.
        return log_gamma_unchecked(x + 1.0) - x.ln();
    }
    let z = x - 1.0;
    let mut sum = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        sum += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (z + 0.5) * t.ln() - t + sum.ln()
}

/// Arguments at or above this use the asymptotic expansion directly.
const ASYMPTOTIC_FROM: f64 = 6.0;

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    let x = PositiveReal::new(x)?;
    Ok(digamma_unchecked(x.get()))
}

pub fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift -= 1.0 / x;
        x += 1.0;
    }
    // ln x - 1/(2x) - Σ B_2k / (2k x^2k)
    let inv2 = 1.0 / (x * x);
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 / x - tail
}

/// Density of Beta(a, b) at x ∈ (0, 1).
pub fn beta_pdf(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!(
            "beta_pdf support is the open interval (0, 1), got x = {x}"
        )));
    }
    let a = PositiveReal::new(a)?.get();
    let b = PositiveReal::new(b)?.get();
    Ok(ln_beta_pdf_unchecked(x, a, b).exp())
}

pub(crate) fn ln_beta_pdf_unchecked(x: f64, a: f64, b: f64) -> f64 {
    let ln_norm = log_gamma_unchecked(a + b) - log_gamma_unchecked(a) - log_gamma_unchecked(b);
    // (a - 1) ln x is taken as 0 when a == 1 so the uniform case is exact.
    let left = if a == 1.0 { 0.0 } else { (a - 1.0) * x.ln() };
    let right = if b == 1.0 { 0.0 } else { (b - 1.0) * (-x).ln_1p() };
    ln_norm + left + right
}
