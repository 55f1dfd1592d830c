use crate::error::{PfpError, Result};
use crate::tensor::{srm_to_variance, SpreadKind};

/// Layout of a compute layer's weight buffer.
///
/// Dense weights are `(out_features, in_features)`, convolution kernels are
/// `(out_channels, in_channels, kernel_h, kernel_w)`, both row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Dense { out_features: usize, in_features: usize },
    Conv2d { out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize },
}

impl Geometry {
    pub fn weight_count(&self) -> usize {
        match *self {
            Geometry::Dense { out_features, in_features } => out_features * in_features,
            Geometry::Conv2d { out_channels, in_channels, kernel_h, kernel_w, .. } => {
                out_channels * in_channels * kernel_h * kernel_w
            }
        }
    }

    /// Number of output neurons (dense) or feature maps (conv).
    pub fn out_width(&self) -> usize {
        match *self {
            Geometry::Dense { out_features, .. } => out_features,
            Geometry::Conv2d { out_channels, .. } => out_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Geometry::Dense { in_features, .. } => in_features,
            Geometry::Conv2d { in_channels, kernel_h, kernel_w, .. } => in_channels * kernel_h * kernel_w,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Geometry::Dense { out_features, in_features } => vec![out_features, in_features],
            Geometry::Conv2d { out_channels, in_channels, kernel_h, kernel_w, .. } => {
                vec![out_channels, in_channels, kernel_h, kernel_w]
            }
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Geometry::Dense { out_features, in_features } => out_features > 0 && in_features > 0,
            Geometry::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride } => {
                out_channels > 0 && in_channels > 0 && kernel_h > 0 && kernel_w > 0 && stride > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(PfpError::ShapeError(format!("degenerate layer geometry {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BiasConfig {
    None,
    Deterministic(Vec<f64>),
    Probabilistic { mean: Vec<f64>, var: Vec<f64> },
}

impl BiasConfig {
    #[inline]
    pub fn mean_at(&self, i: usize) -> f64 {
        match self {
            BiasConfig::None => 0.0,
            BiasConfig::Deterministic(v) => v[i],
            BiasConfig::Probabilistic { mean, .. } => mean[i],
        }
    }

    /// Deterministic biases contribute nothing to the output variance.
    #[inline]
    pub fn var_at(&self, i: usize) -> f64 {
        match self {
            BiasConfig::Probabilistic { var, .. } => var[i],
            _ => 0.0,
        }
    }

    /// Number of stored values (means plus variances).
    pub fn len(&self) -> usize {
        match self {
            BiasConfig::None => 0,
            BiasConfig::Deterministic(v) => v.len(),
            BiasConfig::Probabilistic { mean, .. } => mean.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, width: usize) -> Result<()> {
        match self {
            BiasConfig::None => Ok(()),
            BiasConfig::Deterministic(v) => {
                check_len("bias", v.len(), width)?;
                check_finite("bias", v)
            }
            BiasConfig::Probabilistic { mean, var } => {
                check_len("bias mean", mean.len(), width)?;
                check_len("bias variance", var.len(), width)?;
                check_finite("bias mean", mean)?;
                check_finite("bias variance", var)?;
                check_non_negative("bias variance", var)
            }
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(PfpError::ShapeError(format!("{what}: expected {want} values, got {got}")))
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(PfpError::InvalidArgument(format!("{what}: non-finite value at element {i}"))),
    }
}

fn check_non_negative(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| *x < 0.0) {
        None => Ok(()),
        Some(index) => Err(PfpError::NegativeVariance { tensor: what.to_string(), index, value: v[index] }),
    }
}

/// Gaussian parameters of one compute layer.
///
/// Both spread representations are kept: the variance buffer is the canonical
/// one (it is what gets stored and what the first layer needs) and the second
/// raw moment buffer is derived from it for layers fed by activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeights {
    geometry: Geometry,
    mean: Vec<f64>,
    var: Vec<f64>,
    second_moment: Vec<f64>,
    bias: BiasConfig,
}

impl GaussianWeights {
    pub fn new(geometry: Geometry, mean: Vec<f64>, spread: Vec<f64>, kind: SpreadKind, bias: BiasConfig) -> Result<Self> {
        geometry.check()?;
        let n = geometry.weight_count();
        check_len("weight mean", mean.len(), n)?;
        check_len("weight spread", spread.len(), n)?;
        check_finite("weight mean", &mean)?;
        check_finite("weight spread", &spread)?;
        bias.check(geometry.out_width())?;
        let var = match kind {
            SpreadKind::Variance => {
                check_non_negative("weight variance", &spread)?;
                spread
            }
            SpreadKind::SecondRawMoment => {
                let mut var = Vec::with_capacity(n);
                for (index, (s, m)) in spread.iter().zip(&mean).enumerate() {
                    var.push(srm_to_variance(*s, *m).ok_or(PfpError::CorruptMoments { index, value: s - m * m })?);
                }
                var
            }
        };
        Ok(Self::from_canonical(geometry, mean, var, bias))
    }

    /// Zero-variance weights.
    pub fn deterministic(geometry: Geometry, mean: Vec<f64>, bias: BiasConfig) -> Result<Self> {
        let n = mean.len();
        Self::new(geometry, mean, vec![0.0; n], SpreadKind::Variance, bias)
    }

    fn from_canonical(geometry: Geometry, mean: Vec<f64>, var: Vec<f64>, bias: BiasConfig) -> Self {
        let second_moment = mean.iter().zip(&var).map(|(m, v)| v + m * m).collect();
        GaussianWeights { geometry, mean, var, second_moment, bias }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.var
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Spread buffer in the requested representation.
    pub fn spread(&self, kind: SpreadKind) -> &[f64] {
        match kind {
            SpreadKind::Variance => &self.var,
            SpreadKind::SecondRawMoment => &self.second_moment,
        }
    }

    pub fn bias(&self) -> &BiasConfig {
        &self.bias
    }

    /// Number of random draws needed to sample one realisation (weights then bias).
    pub fn draw_count(&self) -> usize {
        self.mean.len() + self.bias.len()
    }

    /// All weight and probabilistic-bias variances multiplied by `factor`.
    pub fn scale_variances(&self, factor: f64) -> Self {
        let var = self.var.iter().map(|v| v * factor).collect();
        let bias = match &self.bias {
            BiasConfig::Probabilistic { mean, var } => BiasConfig::Probabilistic {
                mean: mean.clone(),
                var: var.iter().map(|v| v * factor).collect(),
            },
            other => other.clone(),
        };
        Self::from_canonical(self.geometry, self.mean.clone(), var, bias)
    }
}
