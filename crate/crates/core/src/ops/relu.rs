use std::f64::consts::FRAC_1_SQRT_2;

use super::{expect_kind, EPS_ACT};
use crate::error::Result;
use crate::special::{erfc, INV_SQRT_2PI};
use crate::tensor::{GaussianTensor, SpreadKind};

/// Mean and second raw moment of `max(X, 0)` for `X ~ N(mean, var)`.
///
/// With `t = μ/√(2σ²)`:
///
/// ```text
/// E[y]  = μ/2·(1 + erf t) + √(σ²/2π)·exp(−t²)
/// E[y²] = (σ² + μ²)/2·(1 + erf t) + μ·√(σ²/2π)·exp(−t²)
/// ```
///
/// `1 + erf t` is evaluated as `erfc(−t)`. Below [`EPS_ACT`] the input is
/// treated as a point mass.
pub fn relu_moments(mean: f64, var: f64) -> (f64, f64) {
    if var < EPS_ACT {
        let y = mean.max(0.0);
        return (y, y * y);
    }
    let sd = var.sqrt();
    let t = mean / sd * FRAC_1_SQRT_2;
    let gate = erfc(-t);
    let density = sd * INV_SQRT_2PI * (-t * t).exp();
    let m = (0.5 * mean * gate + density).max(0.0);
    let srm = 0.5 * (var + mean * mean) * gate + mean * density;
    (m, srm.max(m * m))
}

/// Elementwise ReLU moment matching: variances in, second raw moments out.
pub fn relu_moment_match(input: &GaussianTensor) -> Result<GaussianTensor> {
    expect_kind(input, SpreadKind::Variance)?;
    let (mean, srm) = input
        .mean()
        .iter()
        .zip(input.spread())
        .map(|(&m, &v)| relu_moments(m, v))
        .unzip();
    Ok(GaussianTensor::from_parts(input.shape().to_vec(), mean, srm, SpreadKind::SecondRawMoment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::PfpError;
    use proptest::prelude::*;

    #[test]
    fn standard_normal() {
        let (m, e) = relu_moments(0.0, 1.0);
        assert!((m - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((e - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_regimes() {
        let (m, e) = relu_moments(-10.0, 1e-4);
        assert!(m.abs() < 1e-12 && e.abs() < 1e-12);
        let (m, e) = relu_moments(10.0, 1e-4);
        assert!(((m - 10.0) / 10.0).abs() < 1e-9);
        assert!(((e - 100.0001) / 100.0001).abs() < 1e-9);
    }

    #[test]
    fn point_mass_limit() {
        assert_eq!(relu_moments(2.0, 0.0), (2.0, 4.0));
        assert_eq!(relu_moments(-2.0, 1e-13), (0.0, 0.0));
    }

    #[test]
    fn tensor_operator_kinds() {
        let t = GaussianTensor::new(vec![1, 2], vec![0.0, 1.0], vec![1.0, 0.0], SpreadKind::Variance).unwrap();
        let out = relu_moment_match(&t).unwrap();
        assert_eq!(out.kind(), SpreadKind::SecondRawMoment);
        assert!(out.validate().is_ok());
        assert_eq!(out.mean()[1], 1.0);
        let srm = t.convert_spread(SpreadKind::SecondRawMoment).unwrap();
        assert!(matches!(relu_moment_match(&srm), Err(PfpError::WrongSpreadKind { .. })));
    }

    #[test]
    fn monotone_in_mean_on_grid() {
        for var in [1e-6, 0.01, 0.1, 1.0, 10.0, 100.0] {
            let mut prev = 0.0;
            for k in -400..=400 {
                let (m, _) = relu_moments(k as f64 * 0.05, var);
                assert!(m >= prev, "var {var}, mu {}", k as f64 * 0.05);
                prev = m;
            }
        }
    }

    proptest! {
        #[test]
        fn outputs_are_valid_moments(mean in -50.0f64..50.0, var in 0.0f64..100.0) {
            let (m, e) = relu_moments(mean, var);
            prop_assert!(m >= 0.0);
            // E[max(X, 0)] >= E[X]; rounding may cost a few ulps.
            prop_assert!(m >= mean - 1e-14 * mean.abs());
            prop_assert!(e >= m * m);
            prop_assert!(m.is_finite() && e.is_finite());
        }
    }
}
