//! End-to-end experiment steps shared by the CLI, the FFI layer and the
//! acceptance suite: fitting the final classifier on real plus synthetic
//! features, scoring it, and the n_syn sweep.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classify::{
    self, ClassifierConfig, ClassifyError, CompatModel, CompatPredictor, LabeledFeatures,
    Predictor, SoftmaxModel,
};
use crate::data::{ClassId, FeatureDataset};
use crate::eval::{self, EvalError, GzslReport};
use crate::gan_train::{self, GanError, SynthSet};
use crate::nets::MlpParams;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gan(#[from] GanError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// Train on `Ũ`, predict among unseen classes.
    Zsl,
    /// Train on `S ∪ Ũ`, predict among all classes.
    Gzsl,
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zsl" => Ok(Setting::Zsl),
            "gzsl" => Ok(Setting::Gzsl),
            _ => Err(format!("unknown mode `{s}` (expected zsl or gzsl)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    Softmax,
    Compat,
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softmax" => Ok(ClassifierKind::Softmax),
            "compat" => Ok(ClassifierKind::Compat),
            _ => Err(format!("unknown classifier `{s}` (expected softmax or compat)")),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Softmax => "softmax",
            ClassifierKind::Compat => "compat",
        })
    }
}

/// A trained final classifier of either kind.
pub enum FittedClassifier {
    Softmax(SoftmaxModel),
    Compat(CompatPredictor),
}

impl FittedClassifier {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            FittedClassifier::Softmax(m) => m.save(path)?,
            FittedClassifier::Compat(p) => p.model.save(path)?,
        }
        Ok(())
    }
}

impl Predictor for FittedClassifier {
    fn predict(
        &self,
        x: ArrayView1<'_, f64>,
        label_space: &[ClassId],
    ) -> std::result::Result<ClassId, ClassifyError> {
        match self {
            FittedClassifier::Softmax(m) => m.predict(x, label_space),
            FittedClassifier::Compat(p) => p.predict(x, label_space),
        }
    }
}

/// `Ũ` for ZSL, `S ∪ Ũ` for GZSL, where `S` is the real seen training split.
pub fn training_set(
    ds: &FeatureDataset,
    synth: Option<&SynthSet>,
    setting: Setting,
) -> Result<LabeledFeatures> {
    let synthetic = synth.map(LabeledFeatures::from_synth);
    Ok(match (setting, synthetic) {
        (Setting::Zsl, Some(u)) => u,
        (Setting::Zsl, None) => {
            return Err(GanError::Empty("zsl training needs synthetic features").into())
        }
        (Setting::Gzsl, u) => {
            let real = LabeledFeatures::from_partition(ds, &ds.partitions().train_seen);
            match u {
                Some(u) => real.concat(&u)?,
                None => real,
            }
        }
    })
}

/// Trains the final classifier over the classes present in its training set.
pub fn fit_classifier(
    ds: &FeatureDataset,
    synth: Option<&SynthSet>,
    setting: Setting,
    kind: ClassifierKind,
    config: &ClassifierConfig,
) -> Result<FittedClassifier> {
    let data = training_set(ds, synth, setting)?;
    if data.is_empty() {
        return Err(GanError::Empty("classifier training set is empty").into());
    }
    Ok(match kind {
        ClassifierKind::Softmax => {
            FittedClassifier::Softmax(classify::train_softmax(&data, &data.classes(), config)?)
        }
        ClassifierKind::Compat => {
            let embeddings = ds.class_embeddings().mapv(f64::from);
            let model: CompatModel = classify::train_compat(&data, &embeddings, config)?;
            FittedClassifier::Compat(CompatPredictor { model, embeddings })
        }
    })
}

/// ZSL T1 and the GZSL report of one set of synthetic features.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub zsl_t1: f64,
    pub gzsl: GzslReport,
}

pub fn score_synthesis(
    ds: &FeatureDataset,
    synth: &SynthSet,
    kind: ClassifierKind,
    config: &ClassifierConfig,
) -> Result<Scores> {
    let zsl = fit_classifier(ds, Some(synth), Setting::Zsl, kind, config)?;
    let gzsl = fit_classifier(ds, Some(synth), Setting::Gzsl, kind, config)?;
    Ok(Scores {
        zsl_t1: eval::evaluate_zsl(&zsl, ds)?,
        gzsl: eval::evaluate_gzsl(&gzsl, ds)?,
    })
}

/// GZSL report of a softmax trained on real seen features only.
/// Unseen classes have no column, so `u` is 0.
pub fn no_synthesis_baseline(ds: &FeatureDataset, config: &ClassifierConfig) -> Result<GzslReport> {
    let model = fit_classifier(ds, None, Setting::Gzsl, ClassifierKind::Softmax, config)?;
    Ok(eval::evaluate_gzsl(&model, ds)?)
}

/// Seen-class test accuracy of softmax classifiers trained on real and on
/// generated seen-class features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeenFit {
    pub real: f64,
    pub generated: f64,
}

pub fn seen_fit(
    ds: &FeatureDataset,
    generator: &MlpParams,
    n_syn: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<SeenFit> {
    let test = &ds.partitions().test_seen;
    let seen = ds.seen_ids();
    let real_data = LabeledFeatures::from_partition(ds, &ds.partitions().train_seen);
    let real = classify::train_softmax(&real_data, seen, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth =
        gan_train::synthesize_features(generator, ds.class_embeddings(), seen, n_syn, &mut rng)?;
    let fake = classify::train_softmax(&LabeledFeatures::from_synth(&synth), seen, config)?;
    Ok(SeenFit {
        real: eval::evaluate_partition(&real, ds, test, seen)?,
        generated: eval::evaluate_partition(&fake, ds, test, seen)?,
    })
}

pub const SWEEP_N_SYN: [usize; 5] = [1, 10, 50, 100, 300];
pub const SWEEP_HEADER: &str = "n_syn,zsl_t1,gzsl_u,gzsl_s,gzsl_h";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_syn: usize,
    pub scores: Scores,
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let g = &self.scores.gzsl;
        format!("{},{},{},{},{}", self.n_syn, self.scores.zsl_t1, g.u, g.s, g.h)
    }
}

/// Unseen-class synthesis at each `n_syn`, each from a generator RNG seeded
/// with `seed`, scored with a freshly trained classifier.
pub fn sweep_nsyn(
    ds: &FeatureDataset,
    generator: &MlpParams,
    n_syns: &[usize],
    kind: ClassifierKind,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    n_syns
        .iter()
        .map(|&n_syn| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let synth = gan_train::synthesize_features(
                generator,
                ds.class_embeddings(),
                ds.unseen_ids(),
                n_syn,
                &mut rng,
            )?;
            Ok(SweepRow {
                n_syn,
                scores: score_synthesis(ds, &synth, kind, config)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}
