//! Single-pass propagation of Gaussian weight and activation moments through
//! dense, convolutional, ReLU and max-pool layers, with a sampling oracle,
//! uncertainty metrics and a binary model format.
//!
//! A forward pass takes plain inputs to per-class logit means and variances:
//!
//! ```
//! use pfp_core::{BiasConfig, DeterministicTensor, GaussianWeights, Geometry, LayerSpec, ModelGraph, SpreadKind};
//!
//! let w = GaussianWeights::new(
//!     Geometry::Dense { out_features: 1, in_features: 1 },
//!     vec![2.0],
//!     vec![1.0],
//!     SpreadKind::Variance,
//!     BiasConfig::None,
//! )?;
//! let model = ModelGraph::new("one", vec![1], vec![LayerSpec::Dense(w)])?;
//! let x = DeterministicTensor::new(vec![1, 1], vec![3.0])?;
//! let logits = model.forward(&x)?;
//! assert_eq!((logits.logit_mean()[0], logits.logit_var()[0]), (6.0, 9.0));
//! # Ok::<(), pfp_core::PfpError>(())
//! ```

pub mod bench;
pub mod cli;
pub mod deterministic;
pub mod error;
pub mod format;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod oracle;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod validation;

pub use deterministic::{DetLayer, DeterministicNetwork};
pub use error::{PfpError, Result};
pub use format::{apply_calibration, load_model, load_tensor, save_model, save_tensor};
pub use graph::{LayerSpec, ModelGraph};
pub use metrics::{LogitDistribution, MetricsReport, ProbSampleSet};
pub use ops::{BiasConfig, GaussianWeights, Geometry};
pub use oracle::{empirical_moments, mc_predict, SampleSet};
pub use tensor::{DeterministicTensor, GaussianTensor, SpreadKind};
