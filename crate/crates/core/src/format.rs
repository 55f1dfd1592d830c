//! Binary containers for models and tensors.
//!
//! Model file:
//!
//! ```text
//! "PFPM" | version u32 | manifest_len u64 | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The payload is the concatenation of every tensor referenced by the
//! manifest, IEEE-754 binary32 little-endian, row-major, in manifest order and
//! without gaps. Weight spreads are always stored as variances.
//!
//! Tensor file:
//!
//! ```text
//! "PFPT" | version u32 | rank u32 | dims (rank x u64) | dtype u32 (1 = f32) | payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PfpError, Result};
use crate::graph::{LayerSpec, ModelGraph, FORMAT_VERSION};
use crate::ops::{BiasConfig, GaussianWeights, Geometry};
use crate::tensor::{element_count, DeterministicTensor, SpreadKind};

pub const MODEL_MAGIC: [u8; 4] = *b"PFPM";
pub const TENSOR_MAGIC: [u8; 4] = *b"PFPT";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

const MODEL_HEADER_LEN: usize = 16;

/// Location of one tensor inside the payload. `offset` is in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BiasEntry {
    None,
    Deterministic { mean: TensorRef },
    Probabilistic { mean: TensorRef, var: TensorRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerEntry {
    Dense {
        out_features: usize,
        in_features: usize,
        spread_kind: SpreadKind,
        weight_mean: TensorRef,
        weight_spread: TensorRef,
        bias: BiasEntry,
    },
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        spread_kind: SpreadKind,
        weight_mean: TensorRef,
        weight_spread: TensorRef,
        bias: BiasEntry,
    },
    Relu,
    Maxpool2x2,
    Flatten,
}

/// JSON header of a model file. Field order here is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub calibration_factor: f64,
    pub layers: Vec<LayerEntry>,
    pub payload_bytes: u64,
}

struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, shape: Vec<usize>, values: &[f64]) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for v in values {
            self.bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        TensorRef { shape, offset, count: values.len() as u64 }
    }

    fn push_bias(&mut self, bias: &BiasConfig) -> BiasEntry {
        match bias {
            BiasConfig::None => BiasEntry::None,
            BiasConfig::Deterministic(v) => BiasEntry::Deterministic { mean: self.push(vec![v.len()], v) },
            BiasConfig::Probabilistic { mean, var } => BiasEntry::Probabilistic {
                mean: self.push(vec![mean.len()], mean),
                var: self.push(vec![var.len()], var),
            },
        }
    }
}

/// Serializes a model. Output bytes depend only on the model.
pub fn encode_model(model: &ModelGraph) -> Result<Vec<u8>> {
    model.check()?;
    let mut payload = PayloadWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        layers.push(match layer {
            LayerSpec::Dense(w) | LayerSpec::Conv2d(w) => {
                let shape = w.geometry().weight_shape();
                let weight_mean = payload.push(shape.clone(), w.mean());
                let weight_spread = payload.push(shape, w.variance());
                let bias = payload.push_bias(w.bias());
                let spread_kind = SpreadKind::Variance;
                match w.geometry() {
                    Geometry::Dense { out_features, in_features } => {
                        LayerEntry::Dense { out_features, in_features, spread_kind, weight_mean, weight_spread, bias }
                    }
                    Geometry::Conv2d { out_channels, in_channels, kernel_h, kernel_w, stride } => LayerEntry::Conv2d {
                        out_channels,
                        in_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        spread_kind,
                        weight_mean,
                        weight_spread,
                        bias,
                    },
                }
            }
            LayerSpec::ReLU => LayerEntry::Relu,
            LayerSpec::MaxPool2x2 => LayerEntry::Maxpool2x2,
            LayerSpec::Flatten => LayerEntry::Flatten,
        });
    }
    let manifest = Manifest {
        name: model.name().to_string(),
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        calibration_factor: model.calibration_factor(),
        layers,
        payload_bytes: payload.bytes.len() as u64,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| PfpError::ManifestError(e.to_string()))?;
    let mut out = Vec::with_capacity(MODEL_HEADER_LEN + json.len() + payload.bytes.len());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    if bytes.len() < 4 || bytes[..4] != expected {
        return Err(PfpError::BadMagic { expected, found: bytes[..bytes.len().min(4)].to_vec() });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(bytes.get(at..at + 4)?.try_into().ok()?))
}

fn u64_at(bytes: &[u8], at: usize) -> Option<u64> {
    Some(u64::from_le_bytes(bytes.get(at..at + 8)?.try_into().ok()?))
}

fn manifest_err(msg: impl Into<String>) -> PfpError {
    PfpError::ManifestError(msg.into())
}

/// Walks the payload in manifest order, enforcing contiguous, in-bounds refs.
struct PayloadReader<'a> {
    payload: &'a [u8],
    cursor: u64,
}

impl PayloadReader<'_> {
    fn read(&mut self, what: &str, r: &TensorRef, expected_shape: &[usize]) -> Result<Vec<f64>> {
        if r.shape != expected_shape {
            return Err(manifest_err(format!("{what}: shape {:?} does not match layer geometry {expected_shape:?}", r.shape)));
        }
        let n = element_count(&r.shape) as u64;
        if r.count != n {
            return Err(manifest_err(format!("{what}: count {} does not match shape {:?}", r.count, r.shape)));
        }
        if r.offset != self.cursor {
            return Err(manifest_err(format!("{what}: offset {} breaks payload order (expected {})", r.offset, self.cursor)));
        }
        let end = n.checked_mul(4).and_then(|b| b.checked_add(r.offset));
        let slice = match end {
            Some(end) if end <= self.payload.len() as u64 => &self.payload[r.offset as usize..end as usize],
            _ => return Err(manifest_err(format!("{what}: tensor runs past the payload"))),
        };
        self.cursor += n * 4;
        let mut out = Vec::with_capacity(n as usize);
        for (i, chunk) in slice.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(manifest_err(format!("{what}: non-finite value at element {i}")));
            }
            out.push(f64::from(v));
        }
        Ok(out)
    }

    fn read_bias(&mut self, bias: &BiasEntry, width: usize) -> Result<BiasConfig> {
        Ok(match bias {
            BiasEntry::None => BiasConfig::None,
            BiasEntry::Deterministic { mean } => BiasConfig::Deterministic(self.read("bias mean", mean, &[width])?),
            BiasEntry::Probabilistic { mean, var } => {
                let mean = self.read("bias mean", mean, &[width])?;
                let var = self.read("bias variance", var, &[width])?;
                BiasConfig::Probabilistic { mean, var }
            }
        })
    }

    fn weights(&mut self, geometry: Geometry, kind: SpreadKind, mean: &TensorRef, spread: &TensorRef, bias: &BiasEntry) -> Result<GaussianWeights> {
        if kind != SpreadKind::Variance {
            return Err(manifest_err("weight spreads must be stored as variances"));
        }
        if geometry.weight_count() == 0 || matches!(geometry, Geometry::Conv2d { stride: 0, .. }) {
            return Err(manifest_err(format!("degenerate layer geometry {geometry:?}")));
        }
        let shape = geometry.weight_shape();
        let m = self.read("weight mean", mean, &shape)?;
        let v = self.read("weight variance", spread, &shape)?;
        let b = self.read_bias(bias, geometry.out_width())?;
        GaussianWeights::new(geometry, m, v, SpreadKind::Variance, b).map_err(remap_build_error)
    }
}

fn remap_build_error(e: PfpError) -> PfpError {
    match e {
        PfpError::ShapeError(m) | PfpError::InvalidArgument(m) => PfpError::ManifestError(m),
        other => other,
    }
}

/// Parses and validates a model from bytes.
pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    check_magic(bytes, MODEL_MAGIC)?;
    let version = u32_at(bytes, 4).ok_or_else(|| manifest_err("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(PfpError::UnsupportedVersion(version));
    }
    let manifest_len = u64_at(bytes, 8).ok_or_else(|| manifest_err("truncated header"))?;
    let body = &bytes[MODEL_HEADER_LEN..];
    if manifest_len > body.len() as u64 {
        return Err(manifest_err(format!("manifest length {manifest_len} exceeds the {} bytes after the header", body.len())));
    }
    let (json, payload) = body.split_at(manifest_len as usize);
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| manifest_err(format!("invalid manifest JSON: {e}")))?;
    if manifest.format_version != version {
        return Err(manifest_err(format!(
            "manifest declares version {} but header says {version}",
            manifest.format_version
        )));
    }
    if manifest.payload_bytes != payload.len() as u64 {
        return Err(PfpError::LengthMismatch {
            expected: usize::try_from(manifest.payload_bytes).unwrap_or(usize::MAX),
            found: payload.len(),
        });
    }
    if manifest.layers.is_empty() {
        return Err(manifest_err("model has no layers"));
    }
    if !(manifest.calibration_factor.is_finite() && manifest.calibration_factor > 0.0) {
        return Err(manifest_err(format!("calibration factor {} is not positive", manifest.calibration_factor)));
    }
    let mut reader = PayloadReader { payload, cursor: 0 };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        layers.push(match entry {
            LayerEntry::Dense { out_features, in_features, spread_kind, weight_mean, weight_spread, bias } => {
                let g = Geometry::Dense { out_features: *out_features, in_features: *in_features };
                LayerSpec::Dense(reader.weights(g, *spread_kind, weight_mean, weight_spread, bias)?)
            }
            LayerEntry::Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                spread_kind,
                weight_mean,
                weight_spread,
                bias,
            } => {
                let g = Geometry::Conv2d {
                    out_channels: *out_channels,
                    in_channels: *in_channels,
                    kernel_h: *kernel_h,
                    kernel_w: *kernel_w,
                    stride: *stride,
                };
                LayerSpec::Conv2d(reader.weights(g, *spread_kind, weight_mean, weight_spread, bias)?)
            }
            LayerEntry::Relu => LayerSpec::ReLU,
            LayerEntry::Maxpool2x2 => LayerSpec::MaxPool2x2,
            LayerEntry::Flatten => LayerSpec::Flatten,
        });
    }
    if reader.cursor != payload.len() as u64 {
        return Err(manifest_err(format!("{} trailing payload bytes are not referenced", payload.len() as u64 - reader.cursor)));
    }
    let graph = ModelGraph::new(manifest.name, manifest.input_shape, layers).map_err(remap_build_error)?;
    graph.with_calibration_factor(manifest.calibration_factor).map_err(remap_build_error)
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path.as_ref(), bytes).map_err(|e| PfpError::io(path.as_ref(), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let bytes = fs::read(path.as_ref()).map_err(|e| PfpError::io(path.as_ref(), e))?;
    decode_model(&bytes)
}

pub fn encode_tensor(t: &DeterministicTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape().len() + 4 * t.values().len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in t.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DeterministicTensor> {
    check_magic(bytes, TENSOR_MAGIC)?;
    let short = |expected: usize| PfpError::LengthMismatch { expected, found: bytes.len() };
    let version = u32_at(bytes, 4).ok_or_else(|| short(12))?;
    if version != TENSOR_VERSION {
        return Err(PfpError::UnsupportedVersion(version));
    }
    let rank = u32_at(bytes, 8).ok_or_else(|| short(12))? as usize;
    let header = rank.checked_mul(8).and_then(|d| d.checked_add(16)).ok_or_else(|| short(usize::MAX))?;
    let mut shape = Vec::with_capacity(rank.min(64));
    for i in 0..rank {
        let d = u64_at(bytes, 12 + 8 * i).ok_or_else(|| short(header))?;
        shape.push(usize::try_from(d).map_err(|_| short(usize::MAX))?);
    }
    let dtype = u32_at(bytes, header - 4).ok_or_else(|| short(header))?;
    if dtype != DTYPE_F32 {
        return Err(PfpError::UnsupportedDtype(dtype));
    }
    let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| short(usize::MAX))?;
    let expected = count.checked_mul(4).and_then(|p| p.checked_add(header)).ok_or_else(|| short(usize::MAX))?;
    if bytes.len() != expected {
        return Err(short(expected));
    }
    let values = bytes[header..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk")))).collect();
    DeterministicTensor::new(shape, values)
}

pub fn save_tensor(t: &DeterministicTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode_tensor(t)).map_err(|e| PfpError::io(path.as_ref(), e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DeterministicTensor> {
    let bytes = fs::read(path.as_ref()).map_err(|e| PfpError::io(path.as_ref(), e))?;
    decode_tensor(&bytes)
}

/// Scales all weight and probabilistic-bias variances; see [`ModelGraph::apply_calibration`].
pub fn apply_calibration(model: &ModelGraph, factor: f64) -> Result<ModelGraph> {
    model.apply_calibration(factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp() -> ModelGraph {
        let d1 = GaussianWeights::new(
            Geometry::Dense { out_features: 3, in_features: 2 },
            vec![0.5, -1.0, 0.25, 2.0, -0.75, 1.5],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            SpreadKind::Variance,
            BiasConfig::Probabilistic { mean: vec![0.0, 0.5, -0.5], var: vec![0.01, 0.02, 0.03] },
        )
        .unwrap();
        let d2 = GaussianWeights::new(
            Geometry::Dense { out_features: 2, in_features: 3 },
            vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5],
            vec![0.25; 6],
            SpreadKind::Variance,
            BiasConfig::Deterministic(vec![0.125, -0.125]),
        )
        .unwrap();
        ModelGraph::new("mlp", vec![2], vec![LayerSpec::Dense(d1), LayerSpec::ReLU, LayerSpec::Dense(d2)]).unwrap()
    }

    #[test]
    fn model_roundtrip_is_byte_exact() {
        let m = small_mlp().apply_calibration(0.3).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..4], b"PFPM");
        assert_eq!(encode_model(&m).unwrap(), bytes);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.calibration_factor(), m.calibration_factor());
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn model_errors() {
        let bytes = encode_model(&small_mlp()).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_model(&bad), Err(PfpError::BadMagic { .. })));
        assert!(matches!(decode_model(b"PF"), Err(PfpError::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_model(&v2), Err(PfpError::UnsupportedVersion(2))));
        assert!(matches!(decode_model(&bytes[..10]), Err(PfpError::ManifestError(_))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(PfpError::LengthMismatch { .. })));
    }

    #[test]
    fn empty_model_rejected_on_save() {
        let empty = ModelGraph {
            name: "empty".into(),
            input_shape: vec![2],
            layers: vec![],
            calibration_factor: 1.0,
            format_version: FORMAT_VERSION,
        };
        assert!(matches!(encode_model(&empty), Err(PfpError::ManifestError(_))));
    }

    #[test]
    fn tensor_roundtrip_and_layout() {
        let t = DeterministicTensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        let bytes = encode_tensor(&t);
        let header = 4 + 4 + 4 + 2 * 8 + 4;
        assert_eq!(bytes.len(), header + 24);
        assert_eq!(&bytes[header + 20..header + 24], &5.5f32.to_le_bytes());
        assert_eq!(decode_tensor(&bytes).unwrap(), t);

        let scalar = DeterministicTensor::new(vec![], vec![3.25]).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&scalar)).unwrap(), scalar);
    }

    #[test]
    fn tensor_errors() {
        let t = DeterministicTensor::new(vec![4], vec![1.0; 4]).unwrap();
        let bytes = encode_tensor(&t);
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(PfpError::LengthMismatch { .. })));
        let mut dt = bytes.clone();
        dt[20] = 2;
        assert!(matches!(decode_tensor(&dt), Err(PfpError::UnsupportedDtype(2))));
        let mut magic = bytes.clone();
        magic[0] = b'Q';
        assert!(matches!(decode_tensor(&magic), Err(PfpError::BadMagic { .. })));
    }
}
