//! Sampling reference: draw weight realisations, run plain forward passes.
//!
//! Sample `k` of a run seeded with `seed` uses [`NormalStream::new(seed, k)`]
//! and consumes one normal per parameter in layer order (weights row-major,
//! then biases, deterministic biases included with a zero scale). The draw for
//! a parameter is therefore fixed by `(seed, k, parameter index)` alone.

use std::str::FromStr;

use rayon::prelude::*;

use crate::deterministic::{DetLayer, DeterministicNetwork};
use crate::error::{PfpError, Result};
use crate::graph::{LayerSpec, ModelGraph};
use crate::ops::{BiasConfig, GaussianWeights};
use crate::rng::NormalStream;
use crate::tensor::DeterministicTensor;

/// Logits of `n_samples` sampled networks, laid out `(sample, item, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub n_samples: usize,
    pub batch: usize,
    pub classes: usize,
    pub seed: u64,
    pub logits: Vec<f64>,
}

impl SampleSet {
    pub fn sample(&self, k: usize) -> &[f64] {
        let per = self.batch * self.classes;
        &self.logits[k * per..(k + 1) * per]
    }
}

fn draw(w: &GaussianWeights, stream: &mut NormalStream) -> (Vec<f64>, Vec<f64>) {
    let weights = w
        .mean()
        .iter()
        .zip(w.variance())
        .map(|(m, v)| m + v.sqrt() * stream.next_normal())
        .collect();
    let width = w.geometry().out_width();
    let bias = match w.bias() {
        BiasConfig::None => vec![0.0; width],
        BiasConfig::Deterministic(b) => b.iter().map(|m| m + 0.0 * stream.next_normal()).collect(),
        BiasConfig::Probabilistic { mean, var } => {
            mean.iter().zip(var).map(|(m, v)| m + v.sqrt() * stream.next_normal()).collect()
        }
    };
    (weights, bias)
}

/// One weight realisation `θ = μ + σ·ε` of the whole model.
pub fn sample_deterministic_model(model: &ModelGraph, sample_index: u64, seed: u64) -> DeterministicNetwork {
    let mut stream = NormalStream::new(seed, sample_index);
    let layers = model
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Dense(w) => {
                let (weights, bias) = draw(w, &mut stream);
                DetLayer::Dense { geometry: w.geometry(), weights, bias }
            }
            LayerSpec::Conv2d(w) => {
                let (weights, bias) = draw(w, &mut stream);
                DetLayer::Conv2d { geometry: w.geometry(), weights, bias }
            }
            LayerSpec::ReLU => DetLayer::ReLU,
            LayerSpec::MaxPool2x2 => DetLayer::MaxPool2x2,
            LayerSpec::Flatten => DetLayer::Flatten,
        })
        .collect();
    DeterministicNetwork { input_shape: model.input_shape().to_vec(), layers }
}

/// `n` forward passes over independently sampled networks.
pub fn mc_predict(model: &ModelGraph, input: &DeterministicTensor, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(PfpError::InsufficientSamples { needed: 1, got: 0 });
    }
    model.check_input(input)?;
    let per_sample: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|k| sample_deterministic_model(model, k, seed).forward(input).map(DeterministicTensor::into_values))
        .collect::<Result<_>>()?;
    let batch = input.batch();
    let classes = per_sample[0].len() / batch.max(1);
    Ok(SampleSet { n_samples: n, batch, classes, seed, logits: per_sample.concat() })
}

/// Per-position sample statistics over the sample axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<f64>,
    /// Fourth central moment (1/n normalisation), for variance standard errors.
    pub fourth_central: Vec<f64>,
}

impl EmpiricalMoments {
    /// Standard error of each mean.
    pub fn mean_standard_error(&self) -> Vec<f64> {
        self.var.iter().map(|v| (v / self.n as f64).sqrt()).collect()
    }

    /// Large-sample standard error of each variance estimate,
    /// `sqrt((m₄ − s⁴·(n − 3)/(n − 1)) / n)`.
    pub fn variance_standard_error(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.var
            .iter()
            .zip(&self.fourth_central)
            .map(|(s2, m4)| ((m4 - s2 * s2 * (n - 3.0) / (n - 1.0)).max(0.0) / n).sqrt())
            .collect()
    }
}

pub fn empirical_moments(s: &SampleSet) -> Result<EmpiricalMoments> {
    moments_of(&s.logits, s.n_samples, s.batch * s.classes)
}

/// Moments of `n` rows of width `width`, reduced in ascending row order.
pub fn moments_of(rows: &[f64], n: usize, width: usize) -> Result<EmpiricalMoments> {
    if n < 2 {
        return Err(PfpError::InsufficientSamples { needed: 2, got: n });
    }
    let mut mean = vec![0.0; width];
    for row in rows.chunks_exact(width) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut m2 = vec![0.0; width];
    let mut m4 = vec![0.0; width];
    for row in rows.chunks_exact(width) {
        for j in 0..width {
            let d = row[j] - mean[j];
            let d2 = d * d;
            m2[j] += d2;
            m4[j] += d2 * d2;
        }
    }
    Ok(EmpiricalMoments {
        n,
        mean,
        var: m2.iter().map(|s| s / (n - 1) as f64).collect(),
        fourth_central: m4.iter().map(|s| s / n as f64).collect(),
    })
}

/// Elementwise maps for the scalar micro-oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarTransform {
    Relu,
    Identity,
    /// `max(X, Y)` with an independent `Y ~ N(mean, var)`.
    MaxPair { mean: f64, var: f64 },
}

impl FromStr for ScalarTransform {
    type Err = PfpError;

    /// `relu`, `identity`, or `max-pair:<mean>:<var>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ScalarTransform::Relu),
            "identity" => Ok(ScalarTransform::Identity),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["max-pair", m, v] => match (m.parse(), v.parse()) {
                        (Ok(mean), Ok(var)) => Ok(ScalarTransform::MaxPair { mean, var }),
                        _ => Err(PfpError::UnknownTransform(s.to_string())),
                    },
                    _ => Err(PfpError::UnknownTransform(s.to_string())),
                }
            }
        }
    }
}

/// Monte-Carlo estimates of `E[f(X)]` and `E[f(X)²]` with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMcStats {
    pub n: usize,
    pub mean: f64,
    pub second_moment: f64,
    pub mean_se: f64,
    pub second_moment_se: f64,
}

/// Samples `f(X)` for `X ~ N(mean, var)` from stream `(seed, 0)`.
pub fn scalar_mc_stats(transform: ScalarTransform, mean: f64, var: f64, n: usize, seed: u64) -> Result<ScalarMcStats> {
    if n < 2 {
        return Err(PfpError::InsufficientSamples { needed: 2, got: n });
    }
    let mut stream = NormalStream::new(seed, 0);
    let sd = var.sqrt();
    let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let x = mean + sd * stream.next_normal();
        let y = match transform {
            ScalarTransform::Relu => x.max(0.0),
            ScalarTransform::Identity => x,
            ScalarTransform::MaxPair { mean: m2, var: v2 } => x.max(m2 + v2.sqrt() * stream.next_normal()),
        };
        let y2 = y * y;
        s1 += y;
        s2 += y2;
        s4 += y2 * y2;
    }
    let nf = n as f64;
    let (m1, m2, m4) = (s1 / nf, s2 / nf, s4 / nf);
    let unbiased = nf / (nf - 1.0);
    Ok(ScalarMcStats {
        n,
        mean: m1,
        second_moment: m2,
        mean_se: ((m2 - m1 * m1).max(0.0) * unbiased / nf).sqrt(),
        second_moment_se: ((m4 - m2 * m2).max(0.0) * unbiased / nf).sqrt(),
    })
}

/// Monte-Carlo estimate of `(E[f(X)], E[f(X)²])` for `X ~ N(mean, var)`.
pub fn scalar_mc_moments(transform: ScalarTransform, mean: f64, var: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    scalar_mc_stats(transform, mean, var, n, seed).map(|s| (s.mean, s.second_moment))
}
