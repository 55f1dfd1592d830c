//! 2-D convolution moment propagation.
//!
//! Every output element applies the dense rule over its receptive field
//! `(c, r, s)`, summed in ascending `c`, then `r`, then `s`. Inputs are
//! `(batch, C, H, W)`, kernels `(U, C, R, S)`, outputs `(batch, U, E, F)` with
//! `E = (H − R + stride) / stride` and `F = (W − S + stride) / stride`, both
//! required to be exact.

use super::weights::{GaussianWeights, Geometry};
use super::{expect_kind, map_items, product_variance};
use crate::error::{PfpError, Result};
use crate::tensor::{DeterministicTensor, GaussianTensor, SpreadKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvPlan {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input < kernel || !(input - kernel).is_multiple_of(stride) {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

pub(crate) fn conv_output_dims(item_shape: &[usize], geometry: Geometry) -> Result<Vec<usize>> {
    let Geometry::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride } = geometry else {
        return Err(PfpError::ShapeError(format!("conv operator given {geometry:?} weights")));
    };
    let [c, h, w] = item_shape else {
        return Err(PfpError::ShapeError(format!("conv layer expects (C, H, W) items, got {item_shape:?}")));
    };
    if *c != in_channels {
        return Err(PfpError::ShapeError(format!("conv layer expects {in_channels} channels, got {c}")));
    }
    match (output_extent(*h, kernel_h, stride), output_extent(*w, kernel_w, stride)) {
        (Some(e), Some(f)) => Ok(vec![out_channels, e, f]),
        _ => Err(PfpError::ShapeError(format!(
            "{h}x{w} input does not tile with {kernel_h}x{kernel_w} kernel at stride {stride}"
        ))),
    }
}

pub(crate) fn plan(shape: &[usize], geometry: Geometry) -> Result<ConvPlan> {
    let Some((&batch, item)) = shape.split_first() else {
        return Err(PfpError::ShapeError("conv layer given a rank-0 tensor".into()));
    };
    let out = conv_output_dims(item, geometry)?;
    let Geometry::Conv2d { kernel_h, kernel_w, stride, .. } = geometry else { unreachable!() };
    Ok(ConvPlan {
        batch,
        channels: item[0],
        height: item[1],
        width: item[2],
        out_channels: out[0],
        kernel_h,
        kernel_w,
        stride,
        out_h: out[1],
        out_w: out[2],
    })
}

impl ConvPlan {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn in_per_item(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_per_item(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    /// Generic receptive-field reduction. `term(w_mean, w_spread, x_mean, x_spread)`.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run<F>(
        &self,
        x_mean: &[f64],
        x_spread: &[f64],
        w_mean: &[f64],
        w_spread: &[f64],
        bias_mean: impl Fn(usize) -> f64 + Sync,
        bias_var: impl Fn(usize) -> f64 + Sync,
        term: F,
    ) -> (Vec<f64>, Vec<f64>)
    where
        F: Fn(f64, f64, f64, f64) -> (f64, f64) + Sync,
    {
        let p = *self;
        let (inp, hw) = (p.in_per_item(), p.height * p.width);
        let k_per_u = p.channels * p.kernel_h * p.kernel_w;
        map_items(p.batch, p.out_per_item(), |b, om, os| {
            let xm = &x_mean[b * inp..(b + 1) * inp];
            let xs = &x_spread[b * inp..(b + 1) * inp];
            for u in 0..p.out_channels {
                let wm_u = &w_mean[u * k_per_u..(u + 1) * k_per_u];
                let ws_u = &w_spread[u * k_per_u..(u + 1) * k_per_u];
                for e in 0..p.out_h {
                    for f in 0..p.out_w {
                        let (mut m, mut v) = (0.0, 0.0);
                        for c in 0..p.channels {
                            for r in 0..p.kernel_h {
                                let row = c * hw + (e * p.stride + r) * p.width + f * p.stride;
                                let k = (c * p.kernel_h + r) * p.kernel_w;
                                for s in 0..p.kernel_w {
                                    let (dm, dv) = term(wm_u[k + s], ws_u[k + s], xm[row + s], xs[row + s]);
                                    m += dm;
                                    v += dv;
                                }
                            }
                        }
                        let o = (u * p.out_h + e) * p.out_w + f;
                        om[o] = m + bias_mean(u);
                        os[o] = (v + bias_var(u)).max(0.0);
                    }
                }
            }
        })
    }
}

/// Convolution on second-raw-moment input; emits variances.
pub fn conv2d_pfp(input: &GaussianTensor, w: &GaussianWeights) -> Result<GaussianTensor> {
    expect_kind(input, SpreadKind::SecondRawMoment)?;
    let p = plan(input.shape(), w.geometry())?;
    let bias = w.bias();
    let (m, v) = p.run(
        input.mean(),
        input.spread(),
        w.mean(),
        w.second_moment(),
        |u| bias.mean_at(u),
        |u| bias.var_at(u),
        |wm, we, xm, xe| {
            let q = wm * xm;
            (q, product_variance(we, xe, q))
        },
    );
    Ok(GaussianTensor::from_parts(p.out_shape(), m, v, SpreadKind::Variance))
}

/// First-layer convolution: the input carries no spread.
pub fn conv2d_pfp_det_input(input: &DeterministicTensor, w: &GaussianWeights) -> Result<GaussianTensor> {
    let p = plan(input.shape(), w.geometry())?;
    let bias = w.bias();
    let x = input.values();
    let (m, v) = p.run(x, x, w.mean(), w.variance(), |u| bias.mean_at(u), |u| bias.var_at(u), |wm, wv, x, _| {
        (wm * x, wv * x * x)
    });
    Ok(GaussianTensor::from_parts(p.out_shape(), m, v, SpreadKind::Variance))
}
