//! Layer chains and the single-pass forward propagation.
//!
//! Representation rules between layers:
//!
//! | layer      | consumes                    | emits             |
//! |------------|-----------------------------|-------------------|
//! | first dense/conv | plain values          | variance          |
//! | dense/conv | second raw moment           | variance          |
//! | ReLU       | variance                    | second raw moment |
//! | max pool   | variance                    | variance          |
//! | flatten    | anything                    | same as input     |
//!
//! Two conversions are inserted automatically: second raw moments entering a
//! max pool become variances, and variances entering a compute layer (after a
//! max pool or another compute layer) become second raw moments. Every other
//! mismatch is rejected when the graph is built.

use crate::error::{PfpError, Result};
use crate::metrics::LogitDistribution;
use crate::ops::conv::conv_output_dims;
use crate::ops::{self, GaussianWeights, Geometry};
use crate::tensor::{element_count, DeterministicTensor, GaussianTensor, SpreadKind};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(GaussianWeights),
    Conv2d(GaussianWeights),
    ReLU,
    MaxPool2x2,
    Flatten,
}

impl LayerSpec {
    pub fn weights(&self) -> Option<&GaussianWeights> {
        match self {
            LayerSpec::Dense(w) | LayerSpec::Conv2d(w) => Some(w),
            _ => None,
        }
    }

    pub fn is_compute(&self) -> bool {
        self.weights().is_some()
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::ReLU => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Representation of the activation flowing between two layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repr {
    Plain,
    Gaussian(SpreadKind),
}

/// A spread conversion performed in front of layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conversion {
    pub layer: usize,
    pub from: SpreadKind,
    pub to: SpreadKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub(crate) name: String,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) calibration_factor: f64,
    pub(crate) format_version: u32,
}

impl ModelGraph {
    /// Builds and validates a graph. `input_shape` excludes the batch dimension.
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let g = ModelGraph {
            name: name.into(),
            input_shape,
            layers,
            calibration_factor: 1.0,
            format_version: FORMAT_VERSION,
        };
        g.check()?;
        Ok(g)
    }

    /// Records the factor already folded into the stored variances.
    pub fn with_calibration_factor(mut self, factor: f64) -> Result<Self> {
        check_factor(factor)?;
        self.calibration_factor = factor;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn calibration_factor(&self) -> f64 {
        self.calibration_factor
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().map(|s| element_count(&s)).unwrap_or(0)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.trace().map(|t| t.output_shape)
    }

    /// Conversions the forward pass performs, in layer order.
    pub fn conversions(&self) -> Vec<Conversion> {
        self.trace().map(|t| t.conversions).unwrap_or_default()
    }

    /// Checks layer shapes and representation rules.
    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PfpError::ManifestError("model has no layers".into()));
        }
        check_factor(self.calibration_factor)?;
        self.trace().map(|_| ())
    }

    fn trace(&self) -> Result<Trace> {
        let mut shape = self.input_shape.clone();
        let mut repr = Repr::Plain;
        let mut conversions = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mismatch = |what: &str| PfpError::ConventionMismatch(format!("layer {idx} ({}): {what}", layer.name()));
            match layer {
                LayerSpec::Dense(w) | LayerSpec::Conv2d(w) => {
                    shape = compute_output_dims(layer, w, &shape).map_err(|e| match e {
                        PfpError::ShapeError(m) => PfpError::ShapeError(format!("layer {idx}: {m}")),
                        other => other,
                    })?;
                    if repr == Repr::Gaussian(SpreadKind::Variance) {
                        conversions.push(Conversion { layer: idx, from: SpreadKind::Variance, to: SpreadKind::SecondRawMoment });
                    }
                    repr = Repr::Gaussian(SpreadKind::Variance);
                }
                LayerSpec::ReLU => match repr {
                    Repr::Gaussian(SpreadKind::Variance) => repr = Repr::Gaussian(SpreadKind::SecondRawMoment),
                    Repr::Plain => return Err(mismatch("needs a compute layer in front")),
                    Repr::Gaussian(SpreadKind::SecondRawMoment) => {
                        return Err(mismatch("expects variances but receives second raw moments"))
                    }
                },
                LayerSpec::MaxPool2x2 => {
                    match repr {
                        Repr::Plain => return Err(mismatch("needs a compute layer in front")),
                        Repr::Gaussian(SpreadKind::SecondRawMoment) => conversions.push(Conversion {
                            layer: idx,
                            from: SpreadKind::SecondRawMoment,
                            to: SpreadKind::Variance,
                        }),
                        Repr::Gaussian(SpreadKind::Variance) => {}
                    }
                    let mut full = vec![1];
                    full.extend_from_slice(&shape);
                    shape = ops::maxpool::pooled_shape(&full)
                        .map_err(|e| PfpError::ShapeError(format!("layer {idx}: {e}")))?[1..]
                        .to_vec();
                    repr = Repr::Gaussian(SpreadKind::Variance);
                }
                LayerSpec::Flatten => shape = vec![element_count(&shape)],
            }
        }
        if repr != Repr::Gaussian(SpreadKind::Variance) {
            return Err(PfpError::ConventionMismatch(
                "network output must be the variance-kind output of a compute or pooling layer".into(),
            ));
        }
        if shape.len() != 1 {
            return Err(PfpError::ShapeError(format!("network output must be flat logits, got per-item shape {shape:?}")));
        }
        Ok(Trace { output_shape: shape, conversions })
    }

    /// Whether the propagated logit moments are exact rather than approximate.
    ///
    /// True when at most two compute layers are present, no max pool is used,
    /// and the only ReLU (if any) sits right after the first compute layer,
    /// which must be dense if another compute layer follows. In that setting
    /// every ReLU input is an exact Gaussian and every sum runs over
    /// independent terms.
    pub fn moments_exact(&self) -> bool {
        let compute: Vec<usize> = self.layers.iter().enumerate().filter(|(_, l)| l.is_compute()).map(|(i, _)| i).collect();
        if compute.len() > 2 || self.layers.iter().any(|l| matches!(l, LayerSpec::MaxPool2x2)) {
            return false;
        }
        if compute.len() == 2 && !matches!(self.layers[compute[0]], LayerSpec::Dense(_)) {
            return false;
        }
        let relus: Vec<usize> = self.layers.iter().enumerate().filter(|(_, l)| matches!(l, LayerSpec::ReLU)).map(|(i, _)| i).collect();
        match relus.as_slice() {
            [] => true,
            [r] => self.layers[compute[0] + 1..*r].iter().all(|l| matches!(l, LayerSpec::Flatten)),
            _ => false,
        }
    }

    /// Scales every weight and probabilistic-bias variance by `factor`.
    pub fn apply_calibration(&self, factor: f64) -> Result<ModelGraph> {
        check_factor(factor)?;
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense(w) => LayerSpec::Dense(w.scale_variances(factor)),
                LayerSpec::Conv2d(w) => LayerSpec::Conv2d(w.scale_variances(factor)),
                other => other.clone(),
            })
            .collect();
        Ok(ModelGraph { layers, calibration_factor: self.calibration_factor * factor, ..self.clone() })
    }

    pub(crate) fn check_input(&self, input: &DeterministicTensor) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            return Err(PfpError::ShapeError(format!(
                "model `{}` expects (batch, {:?}) input, got {:?}",
                self.name,
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// One probabilistic forward pass from plain inputs to logit moments.
    pub fn forward(&self, input: &DeterministicTensor) -> Result<LogitDistribution> {
        self.check_input(input)?;
        let batch = input.batch();
        let mut plain = Some(input.clone());
        let mut act: Option<GaussianTensor> = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            act = Some(match (layer, plain.take(), act.take()) {
                (LayerSpec::Dense(w), Some(x), _) => ops::dense_pfp_det_input(&x, w)?,
                (LayerSpec::Conv2d(w), Some(x), _) => ops::conv2d_pfp_det_input(&x, w)?,
                (LayerSpec::Dense(w), None, Some(t)) => ops::dense_pfp(&to_kind(t, SpreadKind::SecondRawMoment)?, w)?,
                (LayerSpec::Conv2d(w), None, Some(t)) => ops::conv2d_pfp(&to_kind(t, SpreadKind::SecondRawMoment)?, w)?,
                (LayerSpec::ReLU, None, Some(t)) => ops::relu_moment_match(&t)?,
                (LayerSpec::MaxPool2x2, None, Some(t)) => ops::maxpool2_pfp(&to_kind(t, SpreadKind::Variance)?)?,
                (LayerSpec::Flatten, Some(x), _) => {
                    let shape = ops::flat_shape(x.shape());
                    plain = Some(x.reshape(shape)?);
                    continue;
                }
                (LayerSpec::Flatten, None, Some(t)) => ops::flatten(&t),
                _ => {
                    return Err(PfpError::ConventionMismatch(format!(
                        "layer {idx} ({}) cannot consume plain input",
                        layer.name()
                    )))
                }
            });
        }
        let out = act.ok_or_else(|| PfpError::ConventionMismatch("network has no compute layer".into()))?;
        let out = to_kind(out, SpreadKind::Variance)?;
        let classes = out.len() / batch.max(1);
        let (_, mean, var, _) = out.into_parts();
        LogitDistribution::new(batch, classes, mean, var)
    }
}

fn to_kind(t: GaussianTensor, kind: SpreadKind) -> Result<GaussianTensor> {
    if t.kind() == kind {
        Ok(t)
    } else {
        t.convert_spread(kind)
    }
}

fn compute_output_dims(layer: &LayerSpec, w: &GaussianWeights, shape: &[usize]) -> Result<Vec<usize>> {
    match (layer, w.geometry()) {
        (LayerSpec::Dense(_), Geometry::Dense { out_features, in_features }) => {
            if shape == [in_features] {
                Ok(vec![out_features])
            } else {
                Err(PfpError::ShapeError(format!("dense layer expects ({in_features},) items, got {shape:?}")))
            }
        }
        (LayerSpec::Conv2d(_), g @ Geometry::Conv2d { .. }) => conv_output_dims(shape, g),
        (_, g) => Err(PfpError::ShapeError(format!("{} layer holds {g:?} weights", layer.name()))),
    }
}

pub(crate) fn check_factor(factor: f64) -> Result<()> {
    if factor.is_finite() && factor > 0.0 {
        Ok(())
    } else {
        Err(PfpError::InvalidArgument(format!("calibration factor must be positive and finite, got {factor}")))
    }
}

struct Trace {
    output_shape: Vec<usize>,
    conversions: Vec<Conversion>,
}
