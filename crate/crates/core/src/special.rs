//! Error function and standard normal helpers.
//!
//! `erf`/`erfc` come from the `libm` crate, a port of the FreeBSD/musl msun
//! implementation (rational approximations on fixed subintervals, < 1 ulp
//! over the real line). The CDF is built on `erfc` so that the lower tail
//! keeps full relative accuracy instead of cancelling in `1 + erf(x)`.

use std::f64::consts::FRAC_1_SQRT_2;

/// `1 / sqrt(2π)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Φ(x)
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// φ(x)
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}
