//! Wall-clock comparison of the single pass against the sampling oracle.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use crate::deterministic::DeterministicNetwork;
use crate::error::{PfpError, Result};
use crate::graph::ModelGraph;
use crate::oracle::mc_predict;
use crate::tensor::DeterministicTensor;

pub const MIN_WARMUP: usize = 3;
pub const MIN_ITERATIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup: MIN_WARMUP, iterations: MIN_ITERATIONS, mc_samples: 30, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub runs_ms: Vec<f64>,
}

/// Times `f` after `warmup` untimed calls, on a monotonic clock.
pub fn time_it<F>(warmup: usize, iterations: usize, mut f: F) -> Result<Timing>
where
    F: FnMut() -> Result<()>,
{
    if iterations == 0 {
        return Err(PfpError::InvalidArgument("benchmark needs at least one timed iteration".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut runs_ms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        f()?;
        runs_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = runs_ms.iter().sum::<f64>() / iterations as f64;
    let mut sorted = runs_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = iterations / 2;
    let median_ms = if iterations % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    Ok(Timing { median_ms, mean_ms, runs_ms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub timing: Timing,
    /// Median of this row over the median of the single pass.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,batch,median_ms,mean_ms,speedup\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.3}", r.method, self.batch, r.timing.median_ms, r.timing.mean_ms, r.speedup);
        }
        s
    }
}

/// Times the single pass, `mc_samples` oracle passes and the mean network.
pub fn run_bench(model: &ModelGraph, input: &DeterministicTensor, cfg: BenchConfig) -> Result<BenchReport> {
    if cfg.warmup < MIN_WARMUP || cfg.iterations < MIN_ITERATIONS {
        return Err(PfpError::InvalidArgument(format!(
            "benchmark needs at least {MIN_WARMUP} warm-up and {MIN_ITERATIONS} timed iterations"
        )));
    }
    let pfp = time_it(cfg.warmup, cfg.iterations, || model.forward(input).map(|d| drop(black_box(d))))?;
    let mc = time_it(cfg.warmup, cfg.iterations, || {
        mc_predict(model, input, cfg.mc_samples, cfg.seed).map(|s| drop(black_box(s)))
    })?;
    let net = DeterministicNetwork::mean_of(model);
    let det = time_it(cfg.warmup, cfg.iterations, || net.forward(input).map(|t| drop(black_box(t))))?;

    let base = pfp.median_ms;
    let row = |method: String, timing: Timing| BenchRow { speedup: timing.median_ms / base, method, timing };
    Ok(BenchReport {
        batch: input.batch(),
        rows: vec![row("pfp".into(), pfp), row(format!("mc@{}", cfg.mc_samples), mc), row("det".into(), det)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mean() {
        let mut k = 0u64;
        let t = time_it(0, 3, || {
            k += 1;
            std::thread::sleep(std::time::Duration::from_millis(k));
            Ok(())
        })
        .unwrap();
        assert_eq!(t.runs_ms.len(), 3);
        assert!(t.median_ms >= 2.0 && t.mean_ms >= 2.0);
        assert!(time_it(0, 0, || Ok(())).is_err());
    }
}
