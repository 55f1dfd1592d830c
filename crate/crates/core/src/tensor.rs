//! Batched activation values carrying a mean and a spread per element.
//!
//! Every tensor is stored row-major with the batch dimension first. The spread
//! buffer holds either variances or second raw moments `E[x²] = μ² + σ²`; the
//! [`SpreadKind`] tag says which, and conversions between the two are explicit.

use std::fmt;

use crate::error::{PfpError, Result};

/// Absolute slack tolerated when a second raw moment dips below `μ²`
/// through rounding.
pub const EPS_REP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    Variance,
    SecondRawMoment,
}

/// First invariant found broken by [`GaussianTensor::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Length { expected: usize, mean: usize, spread: usize },
    NonFinite { index: usize },
    NegativeVariance { index: usize, value: f64 },
    SecondMomentBelowMeanSquare { index: usize, mean: f64, spread: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Length { expected, mean, spread } => write!(
                f,
                "buffer length mismatch: shape wants {expected}, mean has {mean}, spread has {spread}"
            ),
            Violation::NonFinite { index } => write!(f, "non-finite value at element {index}"),
            Violation::NegativeVariance { index, value } => {
                write!(f, "negative variance {value} at element {index}")
            }
            Violation::SecondMomentBelowMeanSquare { index, mean, spread } => write!(
                f,
                "second raw moment {spread} below mean² {} at element {index}",
                mean * mean
            ),
        }
    }
}

pub(crate) fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTensor {
    shape: Vec<usize>,
    mean: Vec<f64>,
    spread: Vec<f64>,
    kind: SpreadKind,
}

impl GaussianTensor {
    /// Builds a tensor and checks every invariant.
    pub fn new(shape: Vec<usize>, mean: Vec<f64>, spread: Vec<f64>, kind: SpreadKind) -> Result<Self> {
        let t = GaussianTensor { shape, mean, spread, kind };
        match t.validate() {
            Ok(()) => Ok(t),
            Err(v) => Err(PfpError::InvariantViolation(v)),
        }
    }

    /// Wraps buffers produced by an operator. Lengths are asserted, values are trusted.
    pub(crate) fn from_parts(shape: Vec<usize>, mean: Vec<f64>, spread: Vec<f64>, kind: SpreadKind) -> Self {
        debug_assert_eq!(mean.len(), element_count(&shape));
        debug_assert_eq!(spread.len(), mean.len());
        GaussianTensor { shape, mean, spread, kind }
    }

    /// A zero-spread tensor holding the given values as means.
    pub fn from_deterministic(t: &DeterministicTensor, kind: SpreadKind) -> Self {
        let spread = match kind {
            SpreadKind::Variance => vec![0.0; t.values.len()],
            SpreadKind::SecondRawMoment => t.values.iter().map(|x| x * x).collect(),
        };
        GaussianTensor::from_parts(t.shape.clone(), t.values.clone(), spread, kind)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn spread(&self) -> &[f64] {
        &self.spread
    }

    pub fn kind(&self) -> SpreadKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Variances, converting on the fly if the tensor holds second raw moments.
    pub fn variances(&self) -> Result<Vec<f64>> {
        Ok(self.convert_spread(SpreadKind::Variance)?.spread)
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>, Vec<f64>, SpreadKind) {
        (self.shape, self.mean, self.spread, self.kind)
    }

    /// Same buffers under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if element_count(&shape) != self.mean.len() {
            return Err(PfpError::ShapeError(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(GaussianTensor { shape, ..self })
    }

    /// Rewrites the spread buffer into `target`, leaving means untouched.
    ///
    /// Second raw moments that come out below zero by at most [`EPS_REP`] are
    /// clamped to a zero variance; anything further below is reported as
    /// [`PfpError::CorruptMoments`].
    pub fn convert_spread(&self, target: SpreadKind) -> Result<GaussianTensor> {
        if target == self.kind {
            return Ok(self.clone());
        }
        let spread = match target {
            SpreadKind::SecondRawMoment => self
                .spread
                .iter()
                .zip(&self.mean)
                .map(|(s, m)| s + m * m)
                .collect(),
            SpreadKind::Variance => {
                let mut out = Vec::with_capacity(self.spread.len());
                for (index, (s, m)) in self.spread.iter().zip(&self.mean).enumerate() {
                    out.push(srm_to_variance(*s, *m).ok_or(PfpError::CorruptMoments {
                        index,
                        value: s - m * m,
                    })?);
                }
                out
            }
        };
        Ok(GaussianTensor { shape: self.shape.clone(), mean: self.mean.clone(), spread, kind: target })
    }

    /// Checks the tensor invariants and reports the first one broken.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let expected = element_count(&self.shape);
        if self.mean.len() != expected || self.spread.len() != expected {
            return Err(Violation::Length { expected, mean: self.mean.len(), spread: self.spread.len() });
        }
        for (index, (&m, &s)) in self.mean.iter().zip(&self.spread).enumerate() {
            if !m.is_finite() || !s.is_finite() {
                return Err(Violation::NonFinite { index });
            }
            match self.kind {
                SpreadKind::Variance if s < 0.0 => {
                    return Err(Violation::NegativeVariance { index, value: s });
                }
                SpreadKind::SecondRawMoment if s < m * m - EPS_REP => {
                    return Err(Violation::SecondMomentBelowMeanSquare { index, mean: m, spread: s });
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `E[x²] - μ²` with the rounding band clamped to zero; `None` if corrupt.
pub(crate) fn srm_to_variance(srm: f64, mean: f64) -> Option<f64> {
    let v = srm - mean * mean;
    if v >= 0.0 {
        Some(v)
    } else if v >= -EPS_REP {
        Some(0.0)
    } else {
        None
    }
}

/// Plain values, used for raw network inputs and sampled forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DeterministicTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape);
        if values.len() != expected {
            return Err(PfpError::ShapeError(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(PfpError::InvariantViolation(Violation::NonFinite { index }));
        }
        Ok(DeterministicTensor { shape, values })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), element_count(&shape));
        DeterministicTensor { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Leading (batch) dimension; a rank-0 tensor counts as one item.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if element_count(&shape) != self.values.len() {
            return Err(PfpError::ShapeError(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(DeterministicTensor { shape, values: self.values })
    }

    /// Items `[start, end)` along the batch dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.is_empty() || start > end || end > self.shape[0] {
            return Err(PfpError::ShapeError(format!(
                "batch slice {start}..{end} out of range for shape {:?}",
                self.shape
            )));
        }
        let per_item = element_count(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(DeterministicTensor::from_parts(shape, self.values[start * per_item..end * per_item].to_vec()))
    }
}
