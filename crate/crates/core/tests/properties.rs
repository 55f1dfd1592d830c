mod common;

use common::{lenet, mlp, Fixture};
use pfp_core::metrics::{
    auroc, decompose, ece, logit_sample, mutual_information, shannon_entropy, softmax, sme, LogitDistribution,
    ProbSampleSet,
};
use pfp_core::ops::dense::{variance_term_second_moment, variance_term_variance};
use pfp_core::ops::{dense_mean_only, dense_pfp, dense_variance_only, flatten, relu_moments};
use pfp_core::{mc_predict, DeterministicNetwork, GaussianTensor, SpreadKind};
use proptest::prelude::*;

fn prob_row(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

prop_compose! {
    fn prob_sets(max_n: usize, max_b: usize, max_c: usize)
        (n in 1..=max_n, b in 1..=max_b, c in 2..=max_c)
        (logits in prop::collection::vec(-6.0f64..6.0, n * b * c), n in Just(n), b in Just(b), c in Just(c))
        -> ProbSampleSet {
        let probs = logits.chunks_exact(c).flat_map(prob_row).collect();
        ProbSampleSet::new(n, b, c, probs).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn variance_forms_agree(wm in -5.0f64..5.0, wv in 0.01f64..4.0, xm in -5.0f64..5.0, xv in 0.01f64..4.0) {
        let a = variance_term_second_moment(wm, wv, xm, xv + xm * xm);
        let b = variance_term_variance(wm, wv, xm, xv);
        prop_assert!((a - b).abs() <= 1e-10 * b, "{a} vs {b}");
    }

    #[test]
    fn spread_conversion_roundtrip(mean in -1e3f64..1e3, var in 0.0f64..1e3) {
        let t = GaussianTensor::new(vec![1], vec![mean], vec![var], SpreadKind::Variance).unwrap();
        let srm = t.convert_spread(SpreadKind::SecondRawMoment).unwrap();
        let back = srm.convert_spread(SpreadKind::Variance).unwrap();
        prop_assert_eq!(back.mean(), t.mean());
        prop_assert!(srm.validate().is_ok() && back.validate().is_ok());
        // Exact up to the rounding of E[x²].
        let ulp = f64::EPSILON * srm.spread()[0].max(f64::MIN_POSITIVE);
        prop_assert!((back.spread()[0] - var).abs() <= ulp);
    }

    #[test]
    fn joint_kernel_equals_separate(seed in 0u64..1000) {
        let mut f = Fixture::new(seed);
        let (out, inp, batch) = (f.int(1, 8), f.int(1, 8), f.int(1, 4));
        let bias = f.bias_kind();
        let w = match f.dense(out, inp, (0.0, 1.0), bias) {
            pfp_core::LayerSpec::Dense(w) => w,
            _ => unreachable!(),
        };
        let mean = f.normals(batch * inp, 1.0);
        let var = f.uniforms(batch * inp, 0.0, 2.0);
        let x = GaussianTensor::new(vec![batch, inp], mean, var, SpreadKind::Variance).unwrap()
            .convert_spread(SpreadKind::SecondRawMoment).unwrap();
        let joint = dense_pfp(&x, &w).unwrap();
        let (mean, var) = (dense_mean_only(&x, &w).unwrap(), dense_variance_only(&x, &w).unwrap());
        prop_assert_eq!(joint.mean(), mean.as_slice());
        prop_assert_eq!(joint.spread(), var.as_slice());
    }

    #[test]
    fn relu_mean_is_monotone(mu in -20.0f64..20.0, step in 1e-6f64..1.0, var in 1e-6f64..50.0) {
        let (a, _) = relu_moments(mu, var);
        let (b, _) = relu_moments(mu + step, var);
        prop_assert!(a >= 0.0 && b >= a);
    }

    #[test]
    fn decomposition_identity(s in prob_sets(8, 3, 6)) {
        let d = decompose(&s);
        let sme = sme(&s);
        let mean = s.mean_probs();
        for b in 0..s.batch() {
            let h = shannon_entropy(&mean[b * s.classes()..(b + 1) * s.classes()]);
            let raw_mi = d.entropy[b] - sme[b];
            prop_assert!((raw_mi + sme[b] - h).abs() <= 1e-12);
            prop_assert!(d.mi[b] >= 0.0);
            prop_assert!(d.mi[b] <= d.entropy[b] + 1e-12);
            prop_assert!(d.entropy[b] <= (s.classes() as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn auroc_is_antisymmetric(
        a in prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.2, 0.5, 0.9, 1.0]), 1..40),
        b in prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.3, 0.5, 0.7, 1.0]), 1..40),
    ) {
        prop_assert_eq!(auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap(), 1.0);
        let v = auroc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn softmax_shift_invariance(logits in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let p = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let q = softmax(&shifted);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn flatten_is_idempotent(b in 1usize..4, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let n = b * c * h * w;
        let t = GaussianTensor::new(vec![b, c, h, w], (0..n).map(|i| i as f64).collect(), vec![1.0; n], SpreadKind::Variance).unwrap();
        let once = flatten(&t);
        prop_assert_eq!(once.shape(), &[b, c * h * w]);
        prop_assert_eq!(once.mean(), t.mean());
        prop_assert_eq!(flatten(&once), once);
    }
}

#[test]
fn calibrated_ece_is_zero() {
    // Bin (0.7, 0.8]: four items at confidence 0.75, three correct.
    // Bin (0.9, 1.0]: two items at confidence 1.0, both correct.
    let probs = [0.75, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.25, 1.0, 0.0, 0.0, 1.0];
    let labels = [0, 1, 0, 1, 0, 1];
    assert!(ece(&probs, 2, &labels, 10).unwrap().abs() < 1e-15);
}

#[test]
fn vanishing_logit_variance_gives_no_mi() {
    let d = LogitDistribution::new(2, 4, vec![0.3, -1.0, 2.0, 0.0, 1.0, 1.0, -1.0, 0.5], vec![1e-12; 8]).unwrap();
    let mi = mutual_information(&logit_sample(&d, 1000, 3).unwrap());
    assert!(mi.iter().all(|m| *m <= 1e-6), "{mi:?}");
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut f = Fixture::new(31);
    let model = lenet(&mut f, 28, (0.0, 1e-3));
    let x = f.inputs(vec![3, 1, 28, 28]);
    let one = in_pool(1, || (model.forward(&x).unwrap(), mc_predict(&model, &x, 8, 5).unwrap()));
    let four = in_pool(4, || (model.forward(&x).unwrap(), mc_predict(&model, &x, 8, 5).unwrap()));
    assert_eq!(one, four);

    let d = one.0;
    let s1 = in_pool(1, || logit_sample(&d, 64, 9).unwrap());
    let s4 = in_pool(4, || logit_sample(&d, 64, 9).unwrap());
    assert_eq!(s1, s4);
}

#[test]
fn zero_variance_mlp_matches_mean_network() {
    let mut f = Fixture::new(32);
    let model = mlp(&mut f, 6, 12, 4, (0.0, 0.0));
    let x = f.inputs(vec![5, 6]);
    let d = model.forward(&x).unwrap();
    let det = DeterministicNetwork::mean_of(&model).forward(&x).unwrap();
    for (a, b) in d.logit_mean().iter().zip(det.values()) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert!(d.logit_var().iter().all(|v| *v <= 1e-12));
}
