#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfp_core::format::save_tensor;
use pfp_core::rng::NormalStream;
use pfp_core::{BiasConfig, DeterministicTensor, GaussianWeights, Geometry, LayerSpec, ModelGraph, SpreadKind};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Uniform and normal draws for building fixtures.
pub struct Fixture {
    uniform: ChaCha8Rng,
    normal: NormalStream,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        Fixture { uniform: ChaCha8Rng::seed_from_u64(seed), normal: NormalStream::new(seed ^ 0x5eed, 0) }
    }

    pub fn unit(&mut self) -> f64 {
        (self.uniform.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.uniform.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        self.normal.next_normal()
    }

    pub fn normals(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }

    pub fn uniforms(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }

    /// Weights with means ~ N(0, 2/fan_in) and variances drawn from `var`.
    pub fn weights(&mut self, geometry: Geometry, var: (f64, f64), bias: BiasKind) -> GaussianWeights {
        let n = geometry.weight_count();
        let scale = (2.0 / geometry.fan_in() as f64).sqrt();
        let mean = self.normals(n, scale);
        let spread = self.uniforms(n, var.0, var.1);
        let width = geometry.out_width();
        let bias = match bias {
            BiasKind::None => BiasConfig::None,
            BiasKind::Deterministic => BiasConfig::Deterministic(self.normals(width, 0.1)),
            BiasKind::Probabilistic => BiasConfig::Probabilistic {
                mean: self.normals(width, 0.1),
                var: self.uniforms(width, var.0, var.1),
            },
        };
        GaussianWeights::new(geometry, mean, spread, SpreadKind::Variance, bias).unwrap()
    }

    pub fn dense(&mut self, out: usize, inp: usize, var: (f64, f64), bias: BiasKind) -> LayerSpec {
        LayerSpec::Dense(self.weights(Geometry::Dense { out_features: out, in_features: inp }, var, bias))
    }

    pub fn conv(&mut self, u: usize, c: usize, k: usize, var: (f64, f64), bias: BiasKind) -> LayerSpec {
        let g = Geometry::Conv2d { out_channels: u, in_channels: c, kernel_h: k, kernel_w: k, stride: 1 };
        LayerSpec::Conv2d(self.weights(g, var, bias))
    }

    pub fn bias_kind(&mut self) -> BiasKind {
        [BiasKind::None, BiasKind::Deterministic, BiasKind::Probabilistic][self.int(0, 2)]
    }

    pub fn inputs(&mut self, shape: Vec<usize>) -> DeterministicTensor {
        let n = shape.iter().product();
        DeterministicTensor::new(shape, self.normals(n, 1.0)).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasKind {
    None,
    Deterministic,
    Probabilistic,
}

/// One or two dense layers with random widths (a chain whose moments are exact).
pub fn random_linear_model(f: &mut Fixture, max_width: usize) -> ModelGraph {
    let inp = f.int(1, max_width);
    let out = f.int(1, 10);
    let var = (0.0, f.range(0.01, 0.5));
    let layers = if f.int(0, 1) == 0 {
        let b = f.bias_kind();
        vec![f.dense(out, inp, var, b)]
    } else {
        let hidden = f.int(1, max_width);
        let (b1, b2) = (f.bias_kind(), f.bias_kind());
        vec![f.dense(hidden, inp, var, b1), f.dense(out, hidden, var, b2)]
    };
    ModelGraph::new("linear", vec![inp], layers).unwrap()
}

/// dense → ReLU → dense.
pub fn mlp(f: &mut Fixture, inp: usize, hidden: usize, out: usize, var: (f64, f64)) -> ModelGraph {
    let layers = vec![
        f.dense(hidden, inp, var, BiasKind::Deterministic),
        LayerSpec::ReLU,
        f.dense(out, hidden, var, BiasKind::Deterministic),
    ];
    ModelGraph::new("mlp", vec![inp], layers).unwrap()
}

/// LeNet-5 layout on `1 × side × side` inputs (side 28 gives the classic 16·4·4 flatten).
pub fn lenet(f: &mut Fixture, side: usize, var: (f64, f64)) -> ModelGraph {
    let s1 = (side - 4) / 2;
    let s2 = (s1 - 4) / 2;
    let layers = vec![
        f.conv(6, 1, 5, var, BiasKind::Deterministic),
        LayerSpec::ReLU,
        LayerSpec::MaxPool2x2,
        f.conv(16, 6, 5, var, BiasKind::Deterministic),
        LayerSpec::ReLU,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        f.dense(120, 16 * s2 * s2, var, BiasKind::Deterministic),
        LayerSpec::ReLU,
        f.dense(84, 120, var, BiasKind::Deterministic),
        LayerSpec::ReLU,
        f.dense(10, 84, var, BiasKind::Deterministic),
    ];
    ModelGraph::new("lenet", vec![1, side, side], layers).unwrap()
}

/// conv → ReLU → max pool → flatten → dense on `1 × side × side` inputs.
pub fn tiny_cnn(f: &mut Fixture, side: usize, classes: usize, var: (f64, f64)) -> ModelGraph {
    let pooled = (side - 2) / 2;
    let layers = vec![
        f.conv(2, 1, 3, var, BiasKind::Deterministic),
        LayerSpec::ReLU,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        f.dense(classes, 2 * pooled * pooled, var, BiasKind::Deterministic),
    ];
    ModelGraph::new("tiny-cnn", vec![1, side, side], layers).unwrap()
}

/// Separable two-class task: the logit of class `c` is large when feature `c` is.
/// OOD inputs carry the signal on features the model was not trained on, which
/// are wired through high-variance, zero-mean weights.
pub struct OodTask {
    pub model: ModelGraph,
    pub id: DeterministicTensor,
    pub labels: Vec<usize>,
    pub ood: DeterministicTensor,
}

pub fn ood_task(f: &mut Fixture, items: usize) -> OodTask {
    // features: [signal_0, signal_1, nuisance_0, nuisance_1]
    let mean = vec![4.0, 0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0];
    let var = vec![1e-4, 1e-4, 4.0, 4.0, 1e-4, 1e-4, 4.0, 4.0];
    let w = GaussianWeights::new(
        Geometry::Dense { out_features: 2, in_features: 4 },
        mean,
        var,
        SpreadKind::Variance,
        BiasConfig::None,
    )
    .unwrap();
    let model = ModelGraph::new("ood-task", vec![4], vec![LayerSpec::Dense(w)]).unwrap();
    let mut id = Vec::with_capacity(items * 4);
    let mut labels = Vec::with_capacity(items);
    for i in 0..items {
        let c = i % 2;
        let mut x = [0.05 * f.normal(), 0.05 * f.normal(), 0.05 * f.normal(), 0.05 * f.normal()];
        x[c] += 1.0;
        id.extend_from_slice(&x);
        labels.push(c);
    }
    let mut ood = Vec::with_capacity(items * 4);
    for _ in 0..items {
        let x = [0.05 * f.normal(), 0.05 * f.normal(), 1.0 + 0.05 * f.normal(), 1.0 + 0.05 * f.normal()];
        ood.extend_from_slice(&x);
    }
    OodTask {
        model,
        id: DeterministicTensor::new(vec![items, 4], id).unwrap(),
        labels,
        ood: DeterministicTensor::new(vec![items, 4], ood).unwrap(),
    }
}

pub fn labels_tensor(labels: &[usize]) -> DeterministicTensor {
    DeterministicTensor::new(vec![labels.len()], labels.iter().map(|l| *l as f64).collect()).unwrap()
}

pub fn write_tensor(dir: &Path, name: &str, t: &DeterministicTensor) -> PathBuf {
    let p = dir.join(name);
    save_tensor(t, &p).unwrap();
    p
}

pub fn pfp<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_pfp")).args(args).output().expect("spawn pfp")
}
