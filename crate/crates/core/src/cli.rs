//! `pfp` command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage or format errors, 3 when a
//! validation run misses its thresholds. Output is assembled in memory and
//! only written once a command has fully succeeded.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{run_bench, BenchConfig};
use crate::error::{PfpError, Result};
use crate::format::{load_model, load_tensor, save_model};
use crate::graph::ModelGraph;
use crate::metrics::{evaluate, Dataset, EvalOptions, InferenceMode, OodScore};
use crate::oracle::{empirical_moments, mc_predict};
use crate::validation::validate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_VALIDATION_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pfp", version, about = "Single-pass Gaussian moment propagation for Bayesian networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-item logit means and variances as CSV.
    Infer(RunArgs),
    /// Compare single-pass moments with the sampling oracle.
    Validate(RunArgs),
    /// Accuracy, uncertainty, calibration and OOD metrics.
    Metrics(RunArgs),
    /// Latency of the single pass, the sampling oracle and the mean network.
    Bench(RunArgs),
    /// Write a copy of the model with all variances scaled.
    Calibrate(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pfp,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OodScoreArg {
    Mi,
    Entropy,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Input tensor file, batch-major.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Label tensor file (class indices, one per input item).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pfp")]
    pub mode: Mode,
    /// Oracle samples (defaults: 30 for metrics and bench, 10000 for validate).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Logit draws per item in pfp mode.
    #[arg(long, default_value_t = 100)]
    pub logit_samples: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Variance scaling applied to the model before running (the factor to store for `calibrate`).
    #[arg(long)]
    pub calibration: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub ece_bins: usize,
    /// Out-of-distribution input tensor file.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// Score used to rank OOD items.
    #[arg(long, value_enum, default_value = "mi")]
    pub ood_score: OodScoreArg,
    /// Output file (stdout when absent; required for `calibrate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

/// What a command produced.
struct Outcome {
    stdout: String,
    file: Option<(PathBuf, String)>,
    code: i32,
}

impl Outcome {
    fn text(text: String, out: Option<&PathBuf>) -> Self {
        match out {
            Some(p) => Outcome { stdout: String::new(), file: Some((p.clone(), text)), code: EXIT_OK },
            None => Outcome { stdout: text, file: None, code: EXIT_OK },
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            if let Some((path, text)) = &outcome.file {
                if let Err(e) = fs::write(path, text) {
                    return report(&PfpError::io(path, e));
                }
            }
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(outcome.stdout.as_bytes());
            let _ = stdout.flush();
            outcome.code
        }
        Err(e) => report(&e),
    }
}

fn report(e: &PfpError) -> i32 {
    eprintln!("error[{}]: {e}", e.class());
    EXIT_ERROR
}

fn args_of(cmd: &Command) -> &RunArgs {
    match cmd {
        Command::Infer(a) | Command::Validate(a) | Command::Metrics(a) | Command::Bench(a) | Command::Calibrate(a) => a,
    }
}

fn execute(cmd: &Command) -> Result<Outcome> {
    let args = args_of(cmd);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(PfpError::InvalidArgument("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| PfpError::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cmd {
        Command::Infer(a) => cmd_infer(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    })
}

fn required<'a>(flag: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| PfpError::InvalidArgument(format!("--{flag} is required for this command")))
}

fn load_calibrated(a: &RunArgs) -> Result<ModelGraph> {
    let model = load_model(&a.model)?;
    match a.calibration {
        Some(f) => model.apply_calibration(f),
        None => Ok(model),
    }
}

fn cmd_infer(a: &RunArgs) -> Result<Outcome> {
    let model = load_calibrated(a)?;
    let input = load_tensor(required("input", &a.input)?)?;
    let (batch, classes, mean, var) = match a.mode {
        Mode::Pfp => {
            let d = model.forward(&input)?;
            (d.batch(), d.classes(), d.logit_mean().to_vec(), d.logit_var().to_vec())
        }
        Mode::Mc => {
            let s = mc_predict(&model, &input, a.samples.unwrap_or(30), a.seed)?;
            let m = empirical_moments(&s)?;
            (s.batch, s.classes, m.mean, m.var)
        }
    };
    let mut s = String::from("item");
    (0..classes).for_each(|c| {
        let _ = write!(s, ",mean_{c}");
    });
    (0..classes).for_each(|c| {
        let _ = write!(s, ",var_{c}");
    });
    s.push('\n');
    for b in 0..batch {
        let _ = write!(s, "{b}");
        for v in mean[b * classes..(b + 1) * classes].iter().chain(&var[b * classes..(b + 1) * classes]) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(Outcome::text(s, a.out.as_ref()))
}

fn cmd_validate(a: &RunArgs) -> Result<Outcome> {
    let model = load_calibrated(a)?;
    let input = load_tensor(required("input", &a.input)?)?;
    let report = validate(&model, &input, a.samples.unwrap_or(10_000), a.seed)?;
    let mut out = Outcome::text(report.to_text(), a.out.as_ref());
    if !report.passed {
        out.code = EXIT_VALIDATION_FAILED;
    }
    Ok(out)
}

/// Class indices stored as a rank-1 float tensor.
fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let t = load_tensor(path)?;
    if t.shape().len() != 1 {
        return Err(PfpError::ShapeError(format!("labels must be a rank-1 tensor, got shape {:?}", t.shape())));
    }
    t.values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if *v >= 0.0 && v.fract() == 0.0 {
                Ok(*v as usize)
            } else {
                Err(PfpError::InvalidArgument(format!("label {i} is not a class index: {v}")))
            }
        })
        .collect()
}

fn cmd_metrics(a: &RunArgs) -> Result<Outcome> {
    let model = load_calibrated(a)?;
    let inputs = load_tensor(required("input", &a.input)?)?;
    let labels = load_labels(required("labels", &a.labels)?)?;
    let ood = a.ood.as_deref().map(load_tensor).transpose()?;
    let mode = match a.mode {
        Mode::Pfp => InferenceMode::Pfp { logit_samples: a.logit_samples },
        Mode::Mc => InferenceMode::Mc { samples: a.samples.unwrap_or(30) },
    };
    let opts = EvalOptions {
        ece_bins: a.ece_bins,
        ood_score: match a.ood_score {
            OodScoreArg::Mi => OodScore::MutualInformation,
            OodScoreArg::Entropy => OodScore::Entropy,
        },
    };
    let report = evaluate(&model, &Dataset { inputs, labels }, mode, a.seed, ood.as_ref(), opts)?;
    Ok(match &a.out {
        Some(p) => Outcome { stdout: report.to_key_values(), file: Some((p.clone(), report.to_csv())), code: EXIT_OK },
        None => Outcome::text(report.to_key_values(), None),
    })
}

fn cmd_bench(a: &RunArgs) -> Result<Outcome> {
    let model = load_calibrated(a)?;
    let input = load_tensor(required("input", &a.input)?)?;
    let cfg = BenchConfig { mc_samples: a.samples.unwrap_or(30), seed: a.seed, ..BenchConfig::default() };
    Ok(Outcome::text(run_bench(&model, &input, cfg)?.to_csv(), a.out.as_ref()))
}

fn cmd_calibrate(a: &RunArgs) -> Result<Outcome> {
    let factor = a.calibration.ok_or_else(|| PfpError::InvalidArgument("--calibration is required".into()))?;
    let out = required("out", &a.out)?;
    let model = load_model(&a.model)?.apply_calibration(factor)?;
    save_model(&model, out)?;
    Ok(Outcome { stdout: format!("calibration_factor={}\n", model.calibration_factor()), file: None, code: EXIT_OK })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_are_long_only() {
        for sub in Cli::command().get_subcommands() {
            for arg in sub.get_arguments() {
                assert!(arg.get_short().is_none(), "{} has a short flag", arg.get_id());
            }
        }
    }
}
