//! Single-pass moments checked against the sampling oracle.

use std::fmt::Write as _;

use crate::error::{PfpError, Result};
use crate::graph::ModelGraph;
use crate::oracle::{empirical_moments, mc_predict};
use crate::tensor::DeterministicTensor;

/// Smallest oracle budget accepted for a validation run.
pub const MIN_VALIDATION_SAMPLES: usize = 100;
/// z-score bound for models whose propagated moments are exact.
pub const EXACT_Z_BOUND: f64 = 4.0;
/// Mean bound for approximate models: `|Δμ| ≤ 5·SE + 0.1·sd`.
pub const RELAXED_SE_FACTOR: f64 = 5.0;
pub const RELAXED_SD_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitCheck {
    pub item: usize,
    pub class: usize,
    pub pfp_mean: f64,
    pub mc_mean: f64,
    pub z_mean: f64,
    pub pfp_var: f64,
    pub mc_var: f64,
    pub z_var: f64,
    /// `pfp_var / mc_var`, NaN when both are zero.
    pub var_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_samples: usize,
    pub seed: u64,
    pub exact: bool,
    pub checks: Vec<LogitCheck>,
    pub max_abs_z_mean: f64,
    pub max_abs_z_var: f64,
    pub passed: bool,
}

/// `(a − b)/se`; a zero standard error only tolerates rounding-level gaps.
fn z_score(a: f64, b: f64, se: f64) -> f64 {
    let d = a - b;
    if se > 0.0 {
        d / se
    } else if d.abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())) {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}

/// Runs `n` oracle samples and compares every logit's moments.
///
/// Models whose moments are exact pass when every mean and variance z-score
/// is within [`EXACT_Z_BOUND`]. Other models pass when every mean lies within
/// the relaxed bound; their variance ratios are reported only.
pub fn validate(model: &ModelGraph, input: &DeterministicTensor, n: usize, seed: u64) -> Result<ValidationReport> {
    if n < MIN_VALIDATION_SAMPLES {
        return Err(PfpError::InsufficientSamples { needed: MIN_VALIDATION_SAMPLES, got: n });
    }
    let pfp = model.forward(input)?;
    let samples = mc_predict(model, input, n, seed)?;
    let emp = empirical_moments(&samples)?;
    let se_mean = emp.mean_standard_error();
    let se_var = emp.variance_standard_error();
    let exact = model.moments_exact();

    let mut checks = Vec::with_capacity(emp.mean.len());
    let mut passed = true;
    for i in 0..emp.mean.len() {
        let (pm, pv) = (pfp.logit_mean()[i], pfp.logit_var()[i]);
        let (mm, mv) = (emp.mean[i], emp.var[i]);
        let z_mean = z_score(pm, mm, se_mean[i]);
        let z_var = z_score(pv, mv, se_var[i]);
        let ok = if exact {
            z_mean.abs() <= EXACT_Z_BOUND && z_var.abs() <= EXACT_Z_BOUND
        } else {
            (pm - mm).abs() <= RELAXED_SE_FACTOR * se_mean[i] + RELAXED_SD_FRACTION * mv.sqrt() + 1e-9 * (1.0 + mm.abs())
        };
        passed &= ok;
        checks.push(LogitCheck {
            item: i / pfp.classes(),
            class: i % pfp.classes(),
            pfp_mean: pm,
            mc_mean: mm,
            z_mean,
            pfp_var: pv,
            mc_var: mv,
            z_var,
            var_ratio: if mv > 0.0 { pv / mv } else if pv == 0.0 { f64::NAN } else { f64::INFINITY },
        });
    }
    let max_abs = |f: fn(&LogitCheck) -> f64| checks.iter().map(|c| f(c).abs()).fold(0.0, f64::max);
    Ok(ValidationReport {
        n_samples: n,
        seed,
        exact,
        max_abs_z_mean: max_abs(|c| c.z_mean),
        max_abs_z_var: max_abs(|c| c.z_var),
        checks,
        passed,
    })
}

impl ValidationReport {
    /// Per-logit CSV table followed by `key=value` summary lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("item,class,pfp_mean,mc_mean,z_mean,pfp_var,mc_var,z_var,var_ratio\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.item, c.class, c.pfp_mean, c.mc_mean, c.z_mean, c.pfp_var, c.mc_var, c.z_var, c.var_ratio
            );
        }
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "exact_moments={}", self.exact);
        let _ = writeln!(s, "max_abs_z_mean={}", self.max_abs_z_mean);
        let _ = writeln!(s, "max_abs_z_var={}", self.max_abs_z_var);
        if self.exact {
            let _ = writeln!(s, "criterion=|z_mean|<={EXACT_Z_BOUND} and |z_var|<={EXACT_Z_BOUND}");
        } else {
            let _ = writeln!(s, "criterion=|mean diff|<={RELAXED_SE_FACTOR}*se+{RELAXED_SD_FRACTION}*sd");
        }
        let _ = writeln!(s, "status={}", if self.passed { "pass" } else { "fail" });
        s
    }
}
