//! 2×2 / stride 2 max pooling on Gaussian activations.
//!
//! Each window `[a b; c d]` is reduced as `max(max(a, b), max(c, d))`, every
//! pairwise max being moment matched with Clark's formulas for two
//! independent Gaussians.

use super::{expect_kind, map_items, EPS_ACT};
use crate::error::{PfpError, Result};
use crate::special::{normal_cdf, normal_pdf};
use crate::tensor::{GaussianTensor, SpreadKind};

/// Mean and variance of `max(X₁, X₂)` for independent Gaussians.
///
/// With `a² = σ₁² + σ₂²` and `α = (μ₁ − μ₂)/a`:
///
/// ```text
/// E[max]  = μ₁Φ(α) + μ₂Φ(−α) + a·φ(α)
/// E[max²] = (μ₁² + σ₁²)Φ(α) + (μ₂² + σ₂²)Φ(−α) + (μ₁ + μ₂)·a·φ(α)
/// ```
///
/// When `a² <` [`EPS_ACT`] the operand with the larger mean is returned, the
/// first one on ties.
pub fn clark_max(m1: f64, v1: f64, m2: f64, v2: f64) -> (f64, f64) {
    let a2 = v1 + v2;
    if a2 < EPS_ACT {
        return if m2 > m1 { (m2, v2) } else { (m1, v1) };
    }
    let a = a2.sqrt();
    let alpha = (m1 - m2) / a;
    let (p, q) = (normal_cdf(alpha), normal_cdf(-alpha));
    let pdf = normal_pdf(alpha);
    let mean = m1 * p + m2 * q + a * pdf;
    let second = (m1 * m1 + v1) * p + (m2 * m2 + v2) * q + (m1 + m2) * a * pdf;
    (mean, (second - mean * mean).max(0.0))
}

pub fn maxpool2_pfp(input: &GaussianTensor) -> Result<GaussianTensor> {
    expect_kind(input, SpreadKind::Variance)?;
    let out_shape = pooled_shape(input.shape())?;
    let (b, ch, h, w) = (out_shape[0], out_shape[1], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let (inp, outp) = (ch * h * w, ch * oh * ow);
    let (mean, var) = map_items(b, outp, |item, om, os| {
        let xm = &input.mean()[item * inp..(item + 1) * inp];
        let xv = &input.spread()[item * inp..(item + 1) * inp];
        for c in 0..ch {
            for i in 0..oh {
                for j in 0..ow {
                    let top = c * h * w + 2 * i * w + 2 * j;
                    let bottom = top + w;
                    let (m_ab, v_ab) = clark_max(xm[top], xv[top], xm[top + 1], xv[top + 1]);
                    let (m_cd, v_cd) = clark_max(xm[bottom], xv[bottom], xm[bottom + 1], xv[bottom + 1]);
                    let (m, v) = clark_max(m_ab, v_ab, m_cd, v_cd);
                    let o = (c * oh + i) * ow + j;
                    om[o] = m;
                    os[o] = v;
                }
            }
        }
    });
    Ok(GaussianTensor::from_parts(out_shape, mean, var, SpreadKind::Variance))
}

pub(crate) fn pooled_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape {
        [b, c, h, w] if h % 2 == 0 && w % 2 == 0 && *h > 0 && *w > 0 => Ok(vec![*b, *c, h / 2, w / 2]),
        _ => Err(PfpError::ShapeError(format!(
            "2x2 max pool needs (batch, C, H, W) with even positive H and W, got {shape:?}"
        ))),
    }
}
