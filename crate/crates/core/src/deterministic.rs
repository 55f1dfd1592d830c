//! Plain (point-weight) network evaluation.
//!
//! This path shares no kernels with the moment operators: it is what each
//! Monte-Carlo weight draw is run through, and the reference the zero-variance
//! model is compared against.

use rayon::prelude::*;

use crate::error::{PfpError, Result};
use crate::graph::{LayerSpec, ModelGraph};
use crate::ops::conv::plan;
use crate::ops::Geometry;
use crate::tensor::{element_count, DeterministicTensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DetLayer {
    Dense { geometry: Geometry, weights: Vec<f64>, bias: Vec<f64> },
    Conv2d { geometry: Geometry, weights: Vec<f64>, bias: Vec<f64> },
    ReLU,
    MaxPool2x2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicNetwork {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) layers: Vec<DetLayer>,
}

impl DeterministicNetwork {
    /// The network obtained by replacing every weight with its mean.
    pub fn mean_of(model: &ModelGraph) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                LayerSpec::Dense(w) | LayerSpec::Conv2d(w) => {
                    let bias = (0..w.geometry().out_width()).map(|i| w.bias().mean_at(i)).collect();
                    let (geometry, weights) = (w.geometry(), w.mean().to_vec());
                    if matches!(l, LayerSpec::Dense(_)) {
                        DetLayer::Dense { geometry, weights, bias }
                    } else {
                        DetLayer::Conv2d { geometry, weights, bias }
                    }
                }
                LayerSpec::ReLU => DetLayer::ReLU,
                LayerSpec::MaxPool2x2 => DetLayer::MaxPool2x2,
                LayerSpec::Flatten => DetLayer::Flatten,
            })
            .collect();
        DeterministicNetwork { input_shape: model.input_shape().to_vec(), layers }
    }

    pub fn layers(&self) -> &[DetLayer] {
        &self.layers
    }

    /// Runs the network; returns `(batch, classes)` logits.
    pub fn forward(&self, input: &DeterministicTensor) -> Result<DeterministicTensor> {
        if input.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(PfpError::ShapeError(format!(
                "expected (batch, {:?}) input, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                DetLayer::Dense { geometry, weights, bias } => dense(&x, *geometry, weights, bias)?,
                DetLayer::Conv2d { geometry, weights, bias } => conv(&x, *geometry, weights, bias)?,
                DetLayer::ReLU => {
                    let shape = x.shape().to_vec();
                    DeterministicTensor::from_parts(shape, x.into_values().into_iter().map(|v| v.max(0.0)).collect())
                }
                DetLayer::MaxPool2x2 => maxpool(&x)?,
                DetLayer::Flatten => {
                    let shape = crate::ops::flat_shape(x.shape());
                    x.reshape(shape)?
                }
            };
        }
        Ok(x)
    }
}

fn per_item<F>(batch: usize, per_item: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut out = vec![0.0; batch * per_item];
    if per_item > 0 {
        out.par_chunks_mut(per_item).enumerate().for_each(|(b, o)| f(b, o));
    }
    out
}

fn dense(x: &DeterministicTensor, geometry: Geometry, w: &[f64], bias: &[f64]) -> Result<DeterministicTensor> {
    let Geometry::Dense { out_features: out, in_features: inp } = geometry else {
        return Err(PfpError::ShapeError("dense layer with conv geometry".into()));
    };
    let batch = match x.shape() {
        [b, n] if *n == inp => *b,
        s => return Err(PfpError::ShapeError(format!("dense layer expects (batch, {inp}), got {s:?}"))),
    };
    let xv = x.values();
    let values = per_item(batch, out, |b, o| {
        let xi = &xv[b * inp..(b + 1) * inp];
        for (i, oi) in o.iter_mut().enumerate() {
            let row = &w[i * inp..(i + 1) * inp];
            *oi = row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + bias[i];
        }
    });
    Ok(DeterministicTensor::from_parts(vec![batch, out], values))
}

fn conv(x: &DeterministicTensor, geometry: Geometry, w: &[f64], bias: &[f64]) -> Result<DeterministicTensor> {
    let p = plan(x.shape(), geometry)?;
    let (inp, hw) = (p.channels * p.height * p.width, p.height * p.width);
    let k_per_u = p.channels * p.kernel_h * p.kernel_w;
    let out_per_item = p.out_channels * p.out_h * p.out_w;
    let xv = x.values();
    let values = per_item(p.batch, out_per_item, |b, o| {
        let xi = &xv[b * inp..(b + 1) * inp];
        // Accumulate one kernel tap at a time across the whole output map.
        for u in 0..p.out_channels {
            let map = &mut o[u * p.out_h * p.out_w..(u + 1) * p.out_h * p.out_w];
            map.iter_mut().for_each(|v| *v = bias[u]);
            for c in 0..p.channels {
                for r in 0..p.kernel_h {
                    for s in 0..p.kernel_w {
                        let wt = w[u * k_per_u + (c * p.kernel_h + r) * p.kernel_w + s];
                        for e in 0..p.out_h {
                            let src = &xi[c * hw + (e * p.stride + r) * p.width + s..];
                            let dst = &mut map[e * p.out_w..(e + 1) * p.out_w];
                            for (f, d) in dst.iter_mut().enumerate() {
                                *d += wt * src[f * p.stride];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(DeterministicTensor::from_parts(p.out_shape(), values))
}

fn maxpool(x: &DeterministicTensor) -> Result<DeterministicTensor> {
    let out_shape = crate::ops::maxpool::pooled_shape(x.shape())?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let inp = element_count(&x.shape()[1..]);
    let (ch, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let xv = x.values();
    let values = per_item(out_shape[0], ch * oh * ow, |b, o| {
        let xi = &xv[b * inp..(b + 1) * inp];
        for c in 0..ch {
            for i in 0..oh {
                for j in 0..ow {
                    let t = c * h * w + 2 * i * w + 2 * j;
                    o[(c * oh + i) * ow + j] = xi[t].max(xi[t + 1]).max(xi[t + w]).max(xi[t + w + 1]);
                }
            }
        }
    });
    Ok(DeterministicTensor::from_parts(out_shape, values))
}
