use std::collections::BTreeSet;

use featgen::classify::{self, Predictor};
use featgen::data::{make_synthetic, ClassId, FeatureDataset, SynthSpec};
use featgen::eval::{evaluate_gzsl, evaluate_zsl, harmonic_mean, per_class_top1, EvalError};
use ndarray::ArrayView1;
use proptest::prelude::*;

fn fixture() -> FeatureDataset {
    let mut spec = SynthSpec::new(4, 3, 6, 4, 10);
    spec.seed = 5;
    make_synthetic(&spec).unwrap()
}

/// Answers with a fixed pseudo-random member of the label space per row.
struct Hashy(u64);

impl Predictor for Hashy {
    fn predict(&self, x: ArrayView1<'_, f64>, space: &[ClassId]) -> classify::Result<ClassId> {
        let mut h = self.0;
        for v in x {
            h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
        }
        Ok(space[(h % space.len() as u64) as usize])
    }
}

/// Nearest class mean, fitted on every row of the dataset.
struct NearestMean(Vec<(ClassId, Vec<f64>)>);

impl NearestMean {
    fn fit(ds: &FeatureDataset) -> Self {
        let mut means = Vec::new();
        for &c in &ds.all_ids() {
            let rows: Vec<u32> = (0..ds.labels().len() as u32)
                .filter(|&i| ds.labels()[i as usize] == c)
                .collect();
            let m = ds.rows(&rows).mean_axis(ndarray::Axis(0)).unwrap();
            means.push((c, m.to_vec()));
        }
        NearestMean(means)
    }
}

impl Predictor for NearestMean {
    fn predict(&self, x: ArrayView1<'_, f64>, space: &[ClassId]) -> classify::Result<ClassId> {
        let dist = |m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        Ok(self
            .0
            .iter()
            .filter(|(c, _)| space.contains(c))
            .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
            .map(|(c, _)| *c)
            .unwrap())
    }
}

#[test]
fn harmonic_mean_examples() {
    assert!((harmonic_mean(43.7, 57.7) - 49.7).abs() < 0.05);
    assert!((harmonic_mean(50.3, 58.3) - 54.0).abs() < 0.05);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    assert_eq!(harmonic_mean(0.0, 80.0), 0.0);
}

#[test]
fn oracle_means_score_high() {
    let mut spec = SynthSpec::new(4, 3, 6, 4, 10);
    spec.noise_sigma = 0.02;
    let ds = make_synthetic(&spec).unwrap();
    let p = NearestMean::fit(&ds);
    let r = evaluate_gzsl(&p, &ds).unwrap();
    assert!(r.u > 90.0 && r.s > 90.0, "{r:?}");
    assert!(evaluate_zsl(&p, &ds).unwrap() > 90.0);
}

#[test]
fn empty_class_set_is_an_error() {
    let e = per_class_top1(&[], &[], &BTreeSet::new()).unwrap_err();
    assert!(matches!(e, EvalError::EmptyPartition(_)));
}

#[test]
fn unknown_truth_is_an_error() {
    let classes: BTreeSet<ClassId> = [0, 1].into();
    assert!(matches!(
        per_class_top1(&[0], &[7], &classes),
        Err(EvalError::UnknownTruth(7))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn harmonic_mean_between_min_and_mean(u in 0.0f64..100.0, s in 0.0f64..100.0) {
        let h = harmonic_mean(u, s);
        prop_assert!(h <= (u + s) / 2.0 + 1e-9);
        prop_assert!(h >= u.min(s) - 1e-9);
        prop_assert!((h - harmonic_mean(s, u)).abs() < 1e-12);
    }

    #[test]
    fn gzsl_report_is_consistent(seed in any::<u64>()) {
        let ds = fixture();
        let p = Hashy(seed);
        let r = evaluate_gzsl(&p, &ds).unwrap();
        prop_assert!((0.0..=100.0).contains(&r.u) && (0.0..=100.0).contains(&r.s));
        prop_assert!((r.h - harmonic_mean(r.u, r.s)).abs() < 1e-12);
        prop_assert_eq!(r.per_class.len(), ds.num_classes());
    }

    #[test]
    fn larger_space_never_helps_a_nearest_rule(seed in 0u64..1000) {
        let mut spec = SynthSpec::new(4, 3, 6, 4, 10);
        spec.seed = seed;
        spec.noise_sigma = 1.0;
        let ds = make_synthetic(&spec).unwrap();
        let p = NearestMean::fit(&ds);
        let t1 = evaluate_zsl(&p, &ds).unwrap();
        let r = evaluate_gzsl(&p, &ds).unwrap();
        prop_assert!(r.u <= t1 + 1e-9, "u {} > t1 {}", r.u, t1);
    }

    #[test]
    fn top1_ignores_row_order(
        pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..60),
        shift in 0usize..60,
    ) {
        let classes: BTreeSet<ClassId> = pairs.iter().map(|p| p.1).collect();
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let a = per_class_top1(&pred, &truth, &classes).unwrap();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift % pairs.len());
        let (pred, truth): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        let b = per_class_top1(&pred, &truth, &classes).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn top1_weights_classes_equally(big in 1usize..50) {
        // class 0 always right, class 1 always wrong: 50% whatever the counts
        let mut pred = vec![0; big];
        let mut truth = vec![0; big];
        pred.push(0);
        truth.push(1);
        let classes: BTreeSet<ClassId> = [0, 1].into();
        prop_assert!((per_class_top1(&pred, &truth, &classes).unwrap() - 50.0).abs() < 1e-12);
    }
}
