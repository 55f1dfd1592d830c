//! Dense layer moment propagation.
//!
//! For neuron `i` with inputs `x_j` and weights `w_ij`:
//!
//! ```text
//! μ_a  = Σ_j μ_w·μ_x                       (+ bias mean)
//! σ_a² = Σ_j E[w²]·E[x²] − (μ_w·μ_x)²      (+ bias variance)
//! ```
//!
//! and, for a first layer fed by plain values, `σ_a² = Σ_j σ_w²·x²`.
//! Sums run in ascending `j`. A summand of the second form that cancels to
//! within a few ulps of `E[w²]·E[x²]` counts as zero.

use super::weights::{GaussianWeights, Geometry};
use super::{expect_kind, map_items, product_variance};
use crate::error::{PfpError, Result};
use crate::tensor::{DeterministicTensor, GaussianTensor, SpreadKind};

fn dense_dims(w: &GaussianWeights) -> Result<(usize, usize)> {
    match w.geometry() {
        Geometry::Dense { out_features, in_features } => Ok((out_features, in_features)),
        g => Err(PfpError::ShapeError(format!("dense operator given {g:?} weights"))),
    }
}

fn check_input(shape: &[usize], in_features: usize) -> Result<usize> {
    match shape {
        [batch, width] if *width == in_features => Ok(*batch),
        _ => Err(PfpError::ShapeError(format!("dense layer expects (batch, {in_features}) input, got {shape:?}"))),
    }
}

/// Shared kernel: `term(w_mean, w_spread, x_mean, x_spread) -> (mean part, variance part)`.
#[inline(always)]
fn dense_kernel<F>(
    x_mean: &[f64],
    x_spread: &[f64],
    batch: usize,
    w: &GaussianWeights,
    w_spread: &[f64],
    term: F,
) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(f64, f64, f64, f64) -> (f64, f64) + Sync,
{
    let (out, inp) = (w.geometry().out_width(), w.geometry().fan_in());
    let bias = w.bias();
    map_items(batch, out, |b, om, os| {
        let xm = &x_mean[b * inp..(b + 1) * inp];
        let xs = &x_spread[b * inp..(b + 1) * inp];
        for i in 0..out {
            let wm = &w.mean()[i * inp..(i + 1) * inp];
            let ws = &w_spread[i * inp..(i + 1) * inp];
            let (mut m, mut v) = (0.0, 0.0);
            for j in 0..inp {
                let (dm, dv) = term(wm[j], ws[j], xm[j], xs[j]);
                m += dm;
                v += dv;
            }
            om[i] = m + bias.mean_at(i);
            // Cancellation in E[w²]E[x²] − (μ_w μ_x)² can leave a rounding-level negative.
            os[i] = (v + bias.var_at(i)).max(0.0);
        }
    })
}

#[inline(always)]
fn srm_term(wm: f64, we: f64, xm: f64, xe: f64) -> (f64, f64) {
    let p = wm * xm;
    (p, product_variance(we, xe, p))
}

/// Joint mean/variance dense operator on second-raw-moment input.
pub fn dense_pfp(input: &GaussianTensor, w: &GaussianWeights) -> Result<GaussianTensor> {
    expect_kind(input, SpreadKind::SecondRawMoment)?;
    let (out, inp) = dense_dims(w)?;
    let batch = check_input(input.shape(), inp)?;
    let (m, v) = dense_kernel(input.mean(), input.spread(), batch, w, w.second_moment(), srm_term);
    Ok(GaussianTensor::from_parts(vec![batch, out], m, v, SpreadKind::Variance))
}

/// First-layer dense operator: the input carries no spread.
pub fn dense_pfp_det_input(input: &DeterministicTensor, w: &GaussianWeights) -> Result<GaussianTensor> {
    let (out, inp) = dense_dims(w)?;
    let batch = check_input(input.shape(), inp)?;
    let x = input.values();
    let (m, v) = dense_kernel(x, x, batch, w, w.variance(), |wm, wv, x, _| (wm * x, wv * x * x));
    Ok(GaussianTensor::from_parts(vec![batch, out], m, v, SpreadKind::Variance))
}

/// Mean path of [`dense_pfp`] on its own.
pub fn dense_mean_only(input: &GaussianTensor, w: &GaussianWeights) -> Result<Vec<f64>> {
    expect_kind(input, SpreadKind::SecondRawMoment)?;
    let (out, inp) = dense_dims(w)?;
    let batch = check_input(input.shape(), inp)?;
    let (m, _) = map_items(batch, out, |b, om, _| {
        let xm = &input.mean()[b * inp..(b + 1) * inp];
        for (i, o) in om.iter_mut().enumerate() {
            let wm = &w.mean()[i * inp..(i + 1) * inp];
            let mut acc = 0.0;
            for j in 0..inp {
                acc += wm[j] * xm[j];
            }
            *o = acc + w.bias().mean_at(i);
        }
    });
    Ok(m)
}

/// Variance path of [`dense_pfp`] on its own.
pub fn dense_variance_only(input: &GaussianTensor, w: &GaussianWeights) -> Result<Vec<f64>> {
    expect_kind(input, SpreadKind::SecondRawMoment)?;
    let (out, inp) = dense_dims(w)?;
    let batch = check_input(input.shape(), inp)?;
    let (_, v) = map_items(batch, out, |b, _, os| {
        let xm = &input.mean()[b * inp..(b + 1) * inp];
        let xe = &input.spread()[b * inp..(b + 1) * inp];
        for (i, o) in os.iter_mut().enumerate() {
            let wm = &w.mean()[i * inp..(i + 1) * inp];
            let we = &w.second_moment()[i * inp..(i + 1) * inp];
            let mut acc = 0.0;
            for j in 0..inp {
                acc += product_variance(we[j], xe[j], wm[j] * xm[j]);
            }
            *o = (acc + w.bias().var_at(i)).max(0.0);
        }
    });
    Ok(v)
}

/// One summand of the output variance, written with the input's second raw moment.
pub fn variance_term_second_moment(w_mean: f64, w_var: f64, x_mean: f64, x_srm: f64) -> f64 {
    w_var * x_srm + w_mean * w_mean * (x_srm - x_mean * x_mean)
}

/// The same summand written with the input's variance.
pub fn variance_term_variance(w_mean: f64, w_var: f64, x_mean: f64, x_var: f64) -> f64 {
    w_var * x_mean * x_mean + w_mean * w_mean * x_var + w_var * x_var
}
