//! Classification uncertainty metrics over predictive samples.
//!
//! All entropies are in nats. Sample-based quantities work on a
//! [`ProbSampleSet`]; single-pass outputs are brought into that form by
//! [`logit_sample`], which draws every class logit independently from its
//! propagated Gaussian and applies a softmax per draw.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{PfpError, Result};
use crate::graph::ModelGraph;
use crate::oracle::{mc_predict, SampleSet};
use crate::rng::NormalStream;
use crate::tensor::DeterministicTensor;

/// Tolerance on the sum of a probability row.
pub const PROB_SUM_TOL: f64 = 1e-9;
/// Mutual information below this is reported as zero.
pub const MI_FLOOR: f64 = 1e-12;

/// Per-class logit moments at the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDistribution {
    batch: usize,
    classes: usize,
    logit_mean: Vec<f64>,
    logit_var: Vec<f64>,
}

impl LogitDistribution {
    pub fn new(batch: usize, classes: usize, logit_mean: Vec<f64>, logit_var: Vec<f64>) -> Result<Self> {
        let n = batch * classes;
        if logit_mean.len() != n || logit_var.len() != n {
            return Err(PfpError::ShapeError(format!(
                "logit buffers must hold {batch}x{classes} values, got {} and {}",
                logit_mean.len(),
                logit_var.len()
            )));
        }
        if let Some(i) = logit_mean.iter().chain(&logit_var).position(|v| !v.is_finite()) {
            return Err(PfpError::InvalidArgument(format!("non-finite logit moment at position {i}")));
        }
        if let Some(index) = logit_var.iter().position(|v| *v < 0.0) {
            return Err(PfpError::NegativeVariance { tensor: "logit variance".into(), index, value: logit_var[index] });
        }
        Ok(LogitDistribution { batch, classes, logit_mean, logit_var })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logit_mean(&self) -> &[f64] {
        &self.logit_mean
    }

    pub fn logit_var(&self) -> &[f64] {
        &self.logit_var
    }

    pub fn item_mean(&self, b: usize) -> &[f64] {
        &self.logit_mean[b * self.classes..(b + 1) * self.classes]
    }

    pub fn item_var(&self, b: usize) -> &[f64] {
        &self.logit_var[b * self.classes..(b + 1) * self.classes]
    }
}

/// Class-probability vectors laid out `(sample, item, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSampleSet {
    n_samples: usize,
    batch: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbSampleSet {
    pub fn new(n_samples: usize, batch: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_samples * batch * classes || classes == 0 {
            return Err(PfpError::ShapeError(format!(
                "probability buffer must hold {n_samples}x{batch}x{classes} values, got {}",
                probs.len()
            )));
        }
        for (r, row) in probs.chunks_exact(classes).enumerate() {
            let in_range = row.iter().all(|p| (0.0..=1.0).contains(p));
            if !in_range || (row.iter().sum::<f64>() - 1.0).abs() > PROB_SUM_TOL {
                return Err(PfpError::InvalidArgument(format!("row {r} is not a probability vector")));
            }
        }
        Ok(ProbSampleSet { n_samples, batch, classes, probs })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability row of item `b` in sample `k`.
    pub fn row(&self, k: usize, b: usize) -> &[f64] {
        let start = (k * self.batch + b) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// Softmax of every sampled logit row.
    pub fn from_logit_samples(s: &SampleSet) -> Result<Self> {
        let probs = s.logits.chunks_exact(s.classes.max(1)).flat_map(softmax).collect();
        ProbSampleSet::new(s.n_samples, s.batch, s.classes, probs)
    }

    /// Sample-averaged probabilities, `(item, class)`, summed in sample order.
    pub fn mean_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.classes];
        for sample in self.probs.chunks_exact(self.batch * self.classes) {
            for (o, p) in out.iter_mut().zip(sample) {
                *o += p;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.n_samples as f64);
        out
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Draws `n` logit vectors per item from the propagated Gaussians.
///
/// Sample `k` uses stream `(seed, k)` and draws item by item, class by class.
pub fn logit_sample(d: &LogitDistribution, n: usize, seed: u64) -> Result<ProbSampleSet> {
    if n == 0 {
        return Err(PfpError::InsufficientSamples { needed: 1, got: 0 });
    }
    let per = d.batch * d.classes;
    let mut probs = vec![0.0; n * per];
    if per > 0 {
        probs.par_chunks_mut(per).enumerate().for_each(|(k, out)| {
            let mut stream = NormalStream::new(seed, k as u64);
            let mut logits = vec![0.0; d.classes];
            for b in 0..d.batch {
                for (c, l) in logits.iter_mut().enumerate() {
                    let i = b * d.classes + c;
                    *l = d.logit_mean[i] + d.logit_var[i].sqrt() * stream.next_normal();
                }
                out[b * d.classes..(b + 1) * d.classes].copy_from_slice(&softmax(&logits));
            }
        });
    }
    ProbSampleSet::new(n, d.batch, d.classes, probs)
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Mean over samples of each sample's entropy, per item.
pub fn sme(s: &ProbSampleSet) -> Vec<f64> {
    (0..s.batch)
        .map(|b| (0..s.n_samples).map(|k| shannon_entropy(s.row(k, b))).sum::<f64>() / s.n_samples as f64)
        .collect()
}

/// Entropy of the mean prediction minus [`sme`], per item; values under
/// [`MI_FLOOR`] are reported as zero.
pub fn mutual_information(s: &ProbSampleSet) -> Vec<f64> {
    decompose(s).mi
}

/// Per-item total entropy, SME and MI.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub entropy: Vec<f64>,
    pub sme: Vec<f64>,
    pub mi: Vec<f64>,
}

pub fn decompose(s: &ProbSampleSet) -> Decomposition {
    let mean = s.mean_probs();
    let entropy: Vec<f64> = mean.chunks_exact(s.classes).map(shannon_entropy).collect();
    let sme = sme(s);
    let mi = entropy.iter().zip(&sme).map(|(h, e)| if h - e < MI_FLOOR { 0.0 } else { h - e }).collect();
    Decomposition { entropy, sme, mi }
}

fn check_labels(n_items: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n_items {
        return Err(PfpError::ShapeError(format!("{} labels for {n_items} items", labels.len())));
    }
    match labels.iter().find(|l| **l >= classes) {
        Some(&label) => Err(PfpError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in row.iter().enumerate() {
        if *p > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of items whose most probable class is the label.
pub fn accuracy(mean_probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    check_labels(mean_probs.len() / classes, classes, labels)?;
    let hits = mean_probs.chunks_exact(classes).zip(labels).filter(|(row, l)| argmax(row) == **l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Mean negative log probability of the true class; probabilities floored at 1e−300.
pub fn nll(mean_probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    check_labels(mean_probs.len() / classes, classes, labels)?;
    let total: f64 = mean_probs.chunks_exact(classes).zip(labels).map(|(row, l)| -row[*l].max(1e-300).ln()).sum();
    Ok(total / labels.len().max(1) as f64)
}

/// Expected calibration error with `bins` equal-width confidence bins.
///
/// Bin `m` (1-based) covers `((m − 1)/M, m/M]`; confidence 0 falls in bin 1.
pub fn ece(mean_probs: &[f64], classes: usize, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(PfpError::InvalidArgument("ECE needs at least one bin".into()));
    }
    check_labels(mean_probs.len() / classes, classes, labels)?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (row, label) in mean_probs.chunks_exact(classes).zip(labels) {
        let pred = argmax(row);
        let conf = row[pred];
        let m = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[m] += 1;
        conf_sum[m] += conf;
        hits[m] += usize::from(pred == *label);
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|m| count[*m] > 0)
        .map(|m| {
            let c = count[m] as f64;
            c / n * (hits[m] as f64 / c - conf_sum[m] / c).abs()
        })
        .sum())
}

/// Probability that an OOD score exceeds an ID score, ties counting one half.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(PfpError::InvalidArgument("AUROC needs non-empty ID and OOD score lists".into()));
    }
    if scores_id.iter().chain(scores_ood).any(|s| s.is_nan()) {
        return Err(PfpError::InvalidArgument("AUROC scores must not be NaN".into()));
    }
    let mut ood = scores_ood.to_vec();
    ood.sort_by(f64::total_cmp);
    // Twice the Mann–Whitney count, kept integral.
    let mut twice: u128 = 0;
    for s in scores_id {
        let below_or_eq = ood.partition_point(|o| o <= s);
        let below = ood.partition_point(|o| o < s);
        let above = ood.len() - below_or_eq;
        twice += 2 * above as u128 + (below_or_eq - below) as u128;
    }
    Ok(twice as f64 / (2 * scores_id.len() as u128 * scores_ood.len() as u128) as f64)
}

/// How predictive samples are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// One moment-propagation pass, then this many logit draws.
    Pfp { logit_samples: usize },
    /// This many sampled networks.
    Mc { samples: usize },
}

/// Per-item score used to tell OOD from ID inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OodScore {
    #[default]
    MutualInformation,
    Entropy,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: DeterministicTensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub ece_bins: usize,
    pub ood_score: OodScore,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ece_bins: 10, ood_score: OodScore::MutualInformation }
    }
}

/// Uncertainty averages over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub n_items: usize,
    pub mean_entropy: f64,
    pub mean_sme: f64,
    pub mean_mi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub id: SplitSummary,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub ood: Option<SplitSummary>,
    pub auroc: Option<f64>,
}

impl MetricsReport {
    pub fn mean_entropy(&self) -> f64 {
        self.id.mean_entropy
    }

    pub fn mean_sme(&self) -> f64 {
        self.id.mean_sme
    }

    pub fn mean_mi(&self) -> f64 {
        self.id.mean_mi
    }

    /// `metric=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_items={}", self.id.n_items);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "mean_entropy={}", self.id.mean_entropy);
        let _ = writeln!(s, "mean_sme={}", self.id.mean_sme);
        let _ = writeln!(s, "mean_mi={}", self.id.mean_mi);
        let _ = writeln!(s, "nll={}", self.nll);
        let _ = writeln!(s, "ece={}", self.ece);
        if let Some(o) = &self.ood {
            let _ = writeln!(s, "ood_n_items={}", o.n_items);
            let _ = writeln!(s, "ood_mean_entropy={}", o.mean_entropy);
            let _ = writeln!(s, "ood_mean_sme={}", o.mean_sme);
            let _ = writeln!(s, "ood_mean_mi={}", o.mean_mi);
        }
        if let Some(a) = self.auroc {
            let _ = writeln!(s, "auroc={a}");
        }
        s
    }

    /// Header plus one row per split. The `auroc` column exists only with an OOD split.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,n_items,accuracy,mean_entropy,mean_sme,mean_mi,nll,ece");
        if self.auroc.is_some() {
            s.push_str(",auroc");
        }
        s.push('\n');
        let auroc = self.auroc.map(|a| format!(",{a}")).unwrap_or_default();
        let id = &self.id;
        let _ = writeln!(
            s,
            "id,{},{},{},{},{},{},{}{auroc}",
            id.n_items, self.accuracy, id.mean_entropy, id.mean_sme, id.mean_mi, self.nll, self.ece
        );
        if let Some(o) = &self.ood {
            let _ = writeln!(s, "ood,{},,{},{},{},,{auroc}", o.n_items, o.mean_entropy, o.mean_sme, o.mean_mi);
        }
        s
    }
}

/// Predictive probability samples for `inputs` under `mode`.
pub fn predictive_samples(model: &ModelGraph, inputs: &DeterministicTensor, mode: InferenceMode, seed: u64) -> Result<ProbSampleSet> {
    match mode {
        InferenceMode::Pfp { logit_samples } => {
            if logit_samples < 2 {
                return Err(PfpError::InsufficientSamples { needed: 2, got: logit_samples });
            }
            logit_sample(&model.forward(inputs)?, logit_samples, seed)
        }
        InferenceMode::Mc { samples } => {
            if samples < 2 {
                return Err(PfpError::InsufficientSamples { needed: 2, got: samples });
            }
            ProbSampleSet::from_logit_samples(&mc_predict(model, inputs, samples, seed)?)
        }
    }
}

fn summarize(d: &Decomposition) -> SplitSummary {
    let n = d.entropy.len();
    let avg = |v: &[f64]| if n == 0 { 0.0 } else { v.iter().sum::<f64>() / n as f64 };
    SplitSummary { n_items: n, mean_entropy: avg(&d.entropy), mean_sme: avg(&d.sme), mean_mi: avg(&d.mi) }
}

/// Full metric stack over a labelled split and an optional OOD split.
///
/// Both splits use the same seed, so in MC mode they see the same sampled networks.
pub fn evaluate(
    model: &ModelGraph,
    dataset: &Dataset,
    mode: InferenceMode,
    seed: u64,
    ood: Option<&DeterministicTensor>,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let classes = model.num_classes();
    check_labels(dataset.inputs.batch(), classes, &dataset.labels)?;
    let samples = predictive_samples(model, &dataset.inputs, mode, seed)?;
    let mean = samples.mean_probs();
    let id_dec = decompose(&samples);
    let accuracy = accuracy(&mean, classes, &dataset.labels)?;
    let nll = nll(&mean, classes, &dataset.labels)?;
    let ece = ece(&mean, classes, &dataset.labels, opts.ece_bins)?;

    let (ood_summary, auroc) = match ood {
        None => (None, None),
        Some(x) => {
            let ood_dec = decompose(&predictive_samples(model, x, mode, seed)?);
            let pick = |d: &Decomposition| match opts.ood_score {
                OodScore::MutualInformation => d.mi.clone(),
                OodScore::Entropy => d.entropy.clone(),
            };
            let a = auroc(&pick(&id_dec), &pick(&ood_dec))?;
            (Some(summarize(&ood_dec)), Some(a))
        }
    };
    Ok(MetricsReport { id: summarize(&id_dec), accuracy, nll, ece, ood: ood_summary, auroc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn set(n: usize, classes: usize, probs: Vec<f64>) -> ProbSampleSet {
        ProbSampleSet::new(n, 1, classes, probs).unwrap()
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[LN_2, 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = softmax(&[0.3, -1.2, 2.5]);
        let b = softmax(&[100.3, 98.8, 102.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((softmax(&[1000.0, 0.0]).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_cases() {
        assert!((shannon_entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((shannon_entropy(&[0.5, 0.5]) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn sme_cases() {
        assert_eq!(sme(&set(2, 2, vec![1.0, 0.0, 0.0, 1.0])), vec![0.0]);
        assert!((sme(&set(2, 2, vec![0.5; 4]))[0] - LN_2).abs() < 1e-15);
        let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let got = sme(&set(2, 2, vec![0.9, 0.1, 0.7, 0.3]))[0];
        assert!((got - (h(0.9) + h(0.7)) / 2.0).abs() < 1e-15);
        assert!((got - 0.467974).abs() < 1e-6);
    }

    #[test]
    fn mi_cases() {
        assert_eq!(mutual_information(&set(3, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7])), vec![0.0]);
        assert!((mutual_information(&set(2, 2, vec![1.0, 0.0, 0.0, 1.0]))[0] - LN_2).abs() < 1e-15);
    }

    #[test]
    fn nll_cases() {
        assert_eq!(nll(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 1]).unwrap(), 0.0);
        assert!((nll(&[0.5, 0.5, 0.5, 0.5], 2, &[0, 1]).unwrap() - LN_2).abs() < 1e-15);
        let v = nll(&[0.8, 0.2, 0.6, 0.4], 2, &[0, 1]).unwrap();
        assert!((v - (-(0.8f64.ln() + 0.4f64.ln()) / 2.0)).abs() < 1e-15);
        assert!(matches!(nll(&[1.0, 0.0], 2, &[2]), Err(PfpError::LabelOutOfRange { label: 2, classes: 2 })));
        // a zero probability is floored, not infinite
        assert!(nll(&[1.0, 0.0], 2, &[1]).unwrap().is_finite());
    }

    #[test]
    fn ece_cases() {
        assert_eq!(ece(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 1], 10).unwrap(), 0.0);
        assert_eq!(ece(&[1.0, 0.0, 0.0, 1.0], 2, &[1, 0], 10).unwrap(), 1.0);
        let v = ece(&[0.8, 0.2, 0.6, 0.4], 2, &[0, 1], 10).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!(ece(&[1.0, 0.0], 2, &[0], 0).is_err());
        // occupied bins with accuracy equal to confidence give zero
        let probs = [0.75, 0.25, 0.75, 0.25, 0.75, 0.25, 0.25, 0.75];
        assert!(ece(&probs, 2, &[0, 0, 0, 0], 10).unwrap().abs() < 1e-15);
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.3], &[0.2, 0.4]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
    }

    #[test]
    fn logit_sampling() {
        let d = LogitDistribution::new(1, 2, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let s = logit_sample(&d, 20, 5).unwrap();
        let expected = softmax(&[1.0, -1.0]);
        for k in 0..20 {
            assert_eq!(s.row(k, 0), expected.as_slice());
        }
        assert_eq!(mutual_information(&s), vec![0.0]);

        let wide = LogitDistribution::new(2, 3, vec![0.0; 6], vec![1.0; 6]).unwrap();
        assert_eq!(logit_sample(&wide, 50, 9).unwrap(), logit_sample(&wide, 50, 9).unwrap());
        assert_ne!(logit_sample(&wide, 50, 9).unwrap(), logit_sample(&wide, 50, 10).unwrap());
        assert!(logit_sample(&wide, 0, 9).is_err());
    }

    #[test]
    fn rejects_malformed_sets() {
        assert!(ProbSampleSet::new(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(ProbSampleSet::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(ProbSampleSet::new(1, 1, 2, vec![1.0]).is_err());
        assert!(LogitDistribution::new(1, 2, vec![0.0, 0.0], vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport {
            id: SplitSummary { n_items: 2, mean_entropy: 0.5, mean_sme: 0.25, mean_mi: 0.25 },
            accuracy: 1.0,
            nll: 0.1,
            ece: 0.0,
            ood: None,
            auroc: None,
        };
        assert!(!r.to_key_values().contains("auroc"));
        assert!(!r.to_csv().contains("auroc"));
        assert_eq!(r.to_csv().lines().count(), 2);
        let with = MetricsReport {
            ood: Some(SplitSummary { n_items: 1, mean_entropy: 1.0, mean_sme: 0.1, mean_mi: 0.9 }),
            auroc: Some(1.0),
            ..r
        };
        assert!(with.to_key_values().contains("auroc=1\n"));
        let csv = with.to_csv();
        assert!(csv.starts_with("split,n_items,accuracy,mean_entropy,mean_sme,mean_mi,nll,ece,auroc\n"));
        assert_eq!(csv.lines().nth(2).unwrap(), "ood,1,,1,0.1,0.9,,,1");
    }
}
