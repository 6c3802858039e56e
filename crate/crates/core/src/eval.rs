//! Per-class averaged top-1 accuracy, and the seen/unseen/harmonic-mean
//! summary for the generalised setting.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::classify::{ClassifyError, Predictor};
use crate::data::{ClassId, FeatureDataset};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("E_EMPTY_CLASS: class {0} has no test samples")]
    EmptyClass(ClassId),
    #[error("{predictions} predictions for {truths} ground-truth labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("ground-truth label {0} is not in the evaluated class set")]
    UnknownTruth(ClassId),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyClass(_) => "E_EMPTY_CLASS",
            EvalError::LengthMismatch { .. } => "E_LENGTH_MISMATCH",
            EvalError::UnknownTruth(_) => "E_UNKNOWN_TRUTH",
            EvalError::EmptyPartition(_) => "E_EMPTY_PARTITION",
            EvalError::Classify(_) => "E_CLASSIFY",
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Accuracy (percent) for each class in `classes`.
pub fn per_class_accuracy(
    predictions: &[ClassId],
    truths: &[ClassId],
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, f64>> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let mut tally: BTreeMap<ClassId, (usize, usize)> =
        classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &t) in predictions.iter().zip(truths) {
        let entry = tally.get_mut(&t).ok_or(EvalError::UnknownTruth(t))?;
        entry.1 += 1;
        if p == t {
            entry.0 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(c, (hit, total))| {
            if total == 0 {
                Err(EvalError::EmptyClass(c))
            } else {
                Ok((c, 100.0 * hit as f64 / total as f64))
            }
        })
        .collect()
}

/// Mean over classes of the within-class hit rate, in percent.
pub fn per_class_top1(
    predictions: &[ClassId],
    truths: &[ClassId],
    classes: &BTreeSet<ClassId>,
) -> Result<f64> {
    let acc = per_class_accuracy(predictions, truths, classes)?;
    if acc.is_empty() {
        return Err(EvalError::EmptyPartition("class set"));
    }
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

/// `2us/(u+s)`, defined as 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Generalised zero-shot summary; all values in percent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GzslReport {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub per_class: BTreeMap<ClassId, f64>,
}

/// Labels the rows of one partition with `predictor` over `label_space`.
fn predict_partition(
    predictor: &dyn Predictor,
    ds: &FeatureDataset,
    indices: &[u32],
    label_space: &[ClassId],
) -> Result<Vec<ClassId>> {
    let x = ds.rows(indices);
    Ok(predictor.predict_batch(&x, label_space)?)
}

/// `u` and `s` with the search space `Y^s ∪ Y^u`, and their harmonic mean.
pub fn evaluate_gzsl(predictor: &dyn Predictor, ds: &FeatureDataset) -> Result<GzslReport> {
    let parts = ds.partitions();
    if parts.test_seen.is_empty() {
        return Err(EvalError::EmptyPartition("test_seen"));
    }
    if parts.test_unseen.is_empty() {
        return Err(EvalError::EmptyPartition("test_unseen"));
    }
    let space = ds.all_ids();
    let seen: BTreeSet<ClassId> = ds.labels_of(&parts.test_seen).into_iter().collect();
    let unseen: BTreeSet<ClassId> = ds.labels_of(&parts.test_unseen).into_iter().collect();

    let pred_s = predict_partition(predictor, ds, &parts.test_seen, &space)?;
    let pred_u = predict_partition(predictor, ds, &parts.test_unseen, &space)?;
    let acc_s = per_class_accuracy(&pred_s, &ds.labels_of(&parts.test_seen), &seen)?;
    let acc_u = per_class_accuracy(&pred_u, &ds.labels_of(&parts.test_unseen), &unseen)?;
    let mean = |m: &BTreeMap<ClassId, f64>| m.values().sum::<f64>() / m.len() as f64;
    let (u, s) = (mean(&acc_u), mean(&acc_s));
    let mut per_class = acc_s;
    per_class.extend(acc_u);
    Ok(GzslReport {
        u,
        s,
        h: harmonic_mean(u, s),
        per_class,
    })
}

/// Per-class top-1 on the unseen test rows with the search space `Y^u`.
pub fn evaluate_zsl(predictor: &dyn Predictor, ds: &FeatureDataset) -> Result<f64> {
    let test = &ds.partitions().test_unseen;
    if test.is_empty() {
        return Err(EvalError::EmptyPartition("test_unseen"));
    }
    let truths = ds.labels_of(test);
    let classes: BTreeSet<ClassId> = truths.iter().copied().collect();
    let pred = predict_partition(predictor, ds, test, ds.unseen_ids())?;
    per_class_top1(&pred, &truths, &classes)
}

/// Per-class top-1 on the rows `indices` with an arbitrary label space.
pub fn evaluate_partition(
    predictor: &dyn Predictor,
    ds: &FeatureDataset,
    indices: &[u32],
    label_space: &[ClassId],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(EvalError::EmptyPartition("evaluated"));
    }
    let truths = ds.labels_of(indices);
    let classes: BTreeSet<ClassId> = truths.iter().copied().collect();
    let pred = predict_partition(predictor, ds, indices, label_space)?;
    per_class_top1(&pred, &truths, &classes)
}

/// Machine-readable report with keys in the order `u, s, h, t1, per_class`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub t1: f64,
    pub per_class: BTreeMap<ClassId, f64>,
}

impl EvalReport {
    pub fn new(gzsl: GzslReport, t1: f64) -> Self {
        EvalReport {
            u: gzsl.u,
            s: gzsl.s,
            h: gzsl.h,
            t1,
            per_class: gzsl.per_class,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numeric report")
    }

    /// Human-readable summary with one decimal.
    pub fn summary(&self) -> String {
        format!(
            "ZSL T1 = {:.1}\nGZSL u = {:.1}  s = {:.1}  H = {:.1}",
            self.t1, self.u, self.s, self.h
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::ClassifyError;
    use crate::data::{FeatureDataset, Partitions};
    use ndarray::{array, ArrayView1};

    fn set(ids: &[ClassId]) -> BTreeSet<ClassId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn per_class_top1_examples() {
        assert_eq!(per_class_top1(&[1, 2], &[1, 2], &set(&[1, 2])).unwrap(), 100.0);
        // A: 1 of 2, B: 1 of 1
        let v = per_class_top1(&[0, 9, 1], &[0, 0, 1], &set(&[0, 1])).unwrap();
        assert_eq!(v, 75.0);
        // replicate class 0 three times
        let v3 = per_class_top1(
            &[0, 9, 0, 9, 0, 9, 1],
            &[0, 0, 0, 0, 0, 0, 1],
            &set(&[0, 1]),
        )
        .unwrap();
        assert_eq!(v3, 75.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        let err = per_class_top1(&[0], &[0], &set(&[0, 1])).unwrap_err();
        assert!(matches!(err, EvalError::EmptyClass(1)));
        assert_eq!(err.code(), "E_EMPTY_CLASS");
        assert!(matches!(
            per_class_top1(&[0], &[], &set(&[0])),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(43.7, 57.7) - 49.7).abs() < 0.05);
        assert!((harmonic_mean(50.3, 58.3) - 54.0).abs() < 0.05);
        assert_eq!(harmonic_mean(50.0, 50.0), 50.0);
        assert_eq!(harmonic_mean(0.0, 80.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    /// Predicts the class whose id equals the rounded first feature.
    struct Oracle;

    impl Predictor for Oracle {
        fn predict(
            &self,
            x: ArrayView1<'_, f64>,
            label_space: &[ClassId],
        ) -> std::result::Result<ClassId, ClassifyError> {
            let guess = x[0].round() as ClassId;
            Ok(if label_space.contains(&guess) {
                guess
            } else {
                label_space[0]
            })
        }
    }

    struct Constant(ClassId);

    impl Predictor for Constant {
        fn predict(
            &self,
            _: ArrayView1<'_, f64>,
            _: &[ClassId],
        ) -> std::result::Result<ClassId, ClassifyError> {
            Ok(self.0)
        }
    }

    fn fixture() -> FeatureDataset {
        FeatureDataset::new(
            array![[0.0f32], [1.0], [0.0], [1.0], [2.0], [2.0], [3.0]],
            vec![0, 1, 0, 1, 2, 2, 3],
            array![[0.0f32], [1.0], [2.0], [3.0]],
            vec![0, 1],
            vec![2, 3],
            Partitions {
                train_seen: vec![0, 1],
                test_seen: vec![2, 3],
                test_unseen: vec![4, 5, 6],
            },
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictor() {
        let ds = fixture();
        let r = evaluate_gzsl(&Oracle, &ds).unwrap();
        assert_eq!((r.u, r.s, r.h), (100.0, 100.0, 100.0));
        assert_eq!(r.per_class.len(), 4);
        assert_eq!(evaluate_zsl(&Oracle, &ds).unwrap(), 100.0);
    }

    #[test]
    fn constant_seen_predictor_scores_zero_h() {
        let r = evaluate_gzsl(&Constant(0), &fixture()).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.s, 50.0);
        assert_eq!(r.h, 0.0);
        assert_eq!(r.per_class[&0], 100.0);
    }

    #[test]
    fn report_key_order() {
        let r = EvalReport::new(evaluate_gzsl(&Oracle, &fixture()).unwrap(), 100.0);
        let json = r.to_json();
        let pos = |k: &str| json.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("u") < pos("s") && pos("s") < pos("h"));
        assert!(pos("h") < pos("t1") && pos("t1") < pos("per_class"));
        assert!(r.summary().contains("H = 100.0"));
    }
}
