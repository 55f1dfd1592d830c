//! Closed-form moment propagation operators.
//!
//! Compute layers (dense, conv) consume second raw moments and emit
//! variances; ReLU consumes variances and emits second raw moments; the 2×2
//! max pool works on variances at both ends. The first compute layer of a
//! network has `_det_input` variants for inputs without any spread.

use rayon::prelude::*;

use crate::error::{PfpError, Result};
use crate::tensor::{element_count, GaussianTensor, SpreadKind};

pub mod conv;
pub mod dense;
pub mod maxpool;
pub mod relu;
pub mod weights;

pub use conv::{conv2d_pfp, conv2d_pfp_det_input};
pub use dense::{dense_mean_only, dense_pfp, dense_pfp_det_input, dense_variance_only};
pub use maxpool::{clark_max, maxpool2_pfp};
pub use relu::{relu_moment_match, relu_moments};
pub use weights::{BiasConfig, Geometry, GaussianWeights};

/// Variance below which erf/φ based formulas switch to their deterministic limits.
pub const EPS_ACT: f64 = 1e-12;

/// Relative rounding band of `E[w²]E[x²]` inside which a product variance is zero.
const PRODUCT_ROUNDING: f64 = 4.0 * f64::EPSILON;

/// Variance of one product of independent factors, `E[w²]E[x²] − (μ_w μ_x)²`,
/// given `p = μ_w μ_x`. A difference no larger than the rounding error of the
/// minuend is reported as zero, so point masses stay point masses.
#[inline(always)]
pub(crate) fn product_variance(w_srm: f64, x_srm: f64, p: f64) -> f64 {
    let s = w_srm * x_srm;
    let d = s - p * p;
    if d <= PRODUCT_ROUNDING * s {
        0.0
    } else {
        d
    }
}

pub(crate) fn expect_kind(t: &GaussianTensor, expected: SpreadKind) -> Result<()> {
    if t.kind() == expected {
        Ok(())
    } else {
        Err(PfpError::WrongSpreadKind { expected, found: t.kind() })
    }
}

/// Runs `f(item, mean_out, spread_out)` for every batch item, possibly in parallel.
/// Items never interact, so the result does not depend on the worker count.
pub(crate) fn map_items<F>(batch: usize, per_item: usize, f: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    let mut mean = vec![0.0; batch * per_item];
    let mut spread = vec![0.0; batch * per_item];
    if per_item == 0 {
        return (mean, spread);
    }
    mean.par_chunks_mut(per_item)
        .zip(spread.par_chunks_mut(per_item))
        .enumerate()
        .for_each(|(b, (m, s))| f(b, m, s));
    (mean, spread)
}

/// Collapses everything after the batch dimension. Kind and buffers are kept.
pub fn flatten(input: &GaussianTensor) -> GaussianTensor {
    let shape = flat_shape(input.shape());
    input.clone().reshape(shape).expect("element count is preserved")
}

pub(crate) fn flat_shape(shape: &[usize]) -> Vec<usize> {
    match shape.split_first() {
        Some((b, rest)) => vec![*b, element_count(rest)],
        None => vec![1, 1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_collapses_and_is_idempotent() {
        let t = GaussianTensor::new(
            vec![2, 1, 2, 2],
            (0..8).map(f64::from).collect(),
            vec![1.0; 8],
            SpreadKind::Variance,
        )
        .unwrap();
        let f = flatten(&t);
        assert_eq!(f.shape(), &[2, 4]);
        assert_eq!(f.mean(), t.mean());
        assert_eq!(f.kind(), SpreadKind::Variance);
        assert_eq!(flatten(&f), f);

        let flat = GaussianTensor::new(vec![3, 2], vec![0.0; 6], vec![0.0; 6], SpreadKind::SecondRawMoment).unwrap();
        assert_eq!(flatten(&flat), flat);
    }
}
