//! Final classifiers trained on real seen features plus synthetic unseen
//! features: a linear softmax model and a bilinear compatibility model.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{logsumexp, Array, AutodiffError, Bindings, Graph, NodeRef, Shape};
use crate::data::{ClassId, FeatureDataset};
use crate::gan_train::SynthSet;
use crate::nets::{self, Layer, MlpParams, NetError};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("class {0} has no training samples")]
    EmptyClass(ClassId),
    #[error("label {0} is not among the model's classes")]
    UnknownLabel(ClassId),
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("no class of the label space is known to the model")]
    NoCandidate,
    #[error("class {0} has no embedding")]
    MissingEmbedding(ClassId),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("training diverged (non-finite loss at epoch {epoch})")]
    NonFinite { epoch: usize },
    #[error("class table {path}: {msg}")]
    ClassTable { path: PathBuf, msg: String },
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

/// Optimiser settings shared by both classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Hinge margin of the compatibility loss.
    pub margin: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 50,
            learn_rate: 1e-3,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            margin: 1.0,
            seed: 0,
        }
    }
}

/// A training set `T` of feature rows and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Array,
    pub labels: Vec<ClassId>,
}

impl LabeledFeatures {
    pub fn new(features: Array, labels: Vec<ClassId>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(ClassifyError::DimMismatch(format!(
                "{} rows, {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(LabeledFeatures { features, labels })
    }

    pub fn from_partition(ds: &FeatureDataset, indices: &[u32]) -> Self {
        LabeledFeatures {
            features: ds.rows(indices),
            labels: ds.labels_of(indices),
        }
    }

    pub fn from_synth(synth: &SynthSet) -> Self {
        LabeledFeatures {
            features: synth.features.mapv(f64::from),
            labels: synth.labels.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(mut self, other: &LabeledFeatures) -> Result<Self> {
        if self.features.ncols() != other.features.ncols() && !other.labels.is_empty() {
            return Err(ClassifyError::DimMismatch(format!(
                "{} vs {} feature columns",
                self.features.ncols(),
                other.features.ncols()
            )));
        }
        self.features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("columns checked");
        self.labels.extend(&other.labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }
}

/// Anything that labels a feature row within a given label space.
pub trait Predictor: Sync {
    fn predict(&self, x: ArrayView1<'_, f64>, label_space: &[ClassId]) -> Result<ClassId>;

    fn predict_batch(&self, x: &Array, label_space: &[ClassId]) -> Result<Vec<ClassId>> {
        (0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict(x.row(i), label_space))
            .collect()
    }
}

/// Argmax over `(class, score)` pairs; ties go to the smallest class id.
fn argmax_by_score(scored: impl Iterator<Item = (ClassId, f64)>) -> Option<ClassId> {
    scored
        .fold(None, |best: Option<(ClassId, f64)>, (c, v)| match best {
            Some((bc, bv)) if bv > v || (bv == v && bc < c) => Some((bc, bv)),
            _ => Some((c, v)),
        })
        .map(|(c, _)| c)
}

/// Mean negative log-likelihood of `targets` (column indices) under the
/// row-wise softmax of `logits`.
pub fn softmax_nll(g: &mut Graph, logits: NodeRef, targets: &[usize]) -> Result<NodeRef> {
    let shape = logits.shape();
    let mut onehot = Array::zeros((shape.rows, shape.cols));
    for (r, &t) in targets.iter().enumerate() {
        onehot[[r, t]] = 1.0;
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(logits, onehot)?;
    let picked = g.sum_to(picked, Shape::new(shape.rows, 1))?;
    let lse = g.logsumexp_rows(logits)?;
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll)?)
}

/// Linear softmax classifier; column `k` of `weight` scores `class_ids[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel {
    pub weight: Array,
    pub bias: Array,
    pub class_ids: Vec<ClassId>,
}

impl SoftmaxModel {
    pub fn zeros(d_x: usize, class_ids: Vec<ClassId>) -> Self {
        let n = class_ids.len();
        SoftmaxModel {
            weight: Array::zeros((d_x, n)),
            bias: Array::zeros((1, n)),
            class_ids,
        }
    }

    pub fn d_x(&self) -> usize {
        self.weight.nrows()
    }

    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn logits(&self, x: &Array) -> Array {
        x.dot(&self.weight) + &self.bias
    }

    /// Row-wise class probabilities.
    pub fn probabilities(&self, x: &Array) -> Array {
        let mut logits = self.logits(x);
        for mut row in logits.rows_mut() {
            let lse = logsumexp(row.iter().copied());
            row.mapv_inplace(|v| (v - lse).exp());
        }
        logits
    }

    /// Mean negative log-likelihood of `data` under the model.
    pub fn nll(&self, data: &LabeledFeatures) -> Result<f64> {
        let targets = self.targets(&data.labels)?;
        let logits = self.logits(&data.features);
        let total: f64 = logits
            .rows()
            .into_iter()
            .zip(&targets)
            .map(|(row, &t)| logsumexp(row.iter().copied()) - row[t])
            .sum();
        Ok(total / data.len() as f64)
    }

    fn targets(&self, labels: &[ClassId]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| self.column_of(l).ok_or(ClassifyError::UnknownLabel(l)))
            .collect()
    }

    pub fn to_params(&self) -> MlpParams {
        MlpParams::linear(Layer {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        })
        .expect("single layer")
    }

    /// Writes the `FGNW` checkpoint plus a `<path>.classes` table.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_params().save(path)?;
        let table: String = self.class_ids.iter().map(|c| format!("{c}\n")).collect();
        fs::write(class_table_path(path), table)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let layer = single_layer(nets::load_layers(path)?)?;
        let table_path = class_table_path(path);
        let text = fs::read_to_string(&table_path)?;
        let class_ids = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<ClassId>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| ClassifyError::ClassTable {
                path: table_path.clone(),
                msg: e.to_string(),
            })?;
        if class_ids.len() != layer.outputs() {
            return Err(ClassifyError::ClassTable {
                path: table_path,
                msg: format!("{} ids for {} columns", class_ids.len(), layer.outputs()),
            });
        }
        Ok(SoftmaxModel {
            weight: layer.weight,
            bias: layer.bias,
            class_ids,
        })
    }
}

fn class_table_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".classes");
    PathBuf::from(p)
}

fn single_layer(mut layers: Vec<Layer>) -> Result<Layer> {
    if layers.len() != 1 {
        return Err(ClassifyError::DimMismatch(format!(
            "classifier checkpoint has {} layers, expected 1",
            layers.len()
        )));
    }
    Ok(layers.pop().unwrap())
}

fn check_coverage(data: &LabeledFeatures, class_ids: &[ClassId]) -> Result<()> {
    let present: BTreeSet<ClassId> = data.labels.iter().copied().collect();
    if let Some(&missing) = class_ids.iter().find(|c| !present.contains(c)) {
        return Err(ClassifyError::EmptyClass(missing));
    }
    Ok(())
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minimises the mean softmax negative log-likelihood over `data` with Adam.
pub fn train_softmax(
    data: &LabeledFeatures,
    class_ids: &[ClassId],
    config: &ClassifierConfig,
) -> Result<SoftmaxModel> {
    check_coverage(data, class_ids)?;
    let mut model = SoftmaxModel::zeros(data.features.ncols(), class_ids.to_vec());
    let targets = model.targets(&data.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        AdamConfig::new(config.learn_rate, config.beta1, config.beta2),
        &[&model.weight, &model.bias],
    );
    for epoch in 0..config.epochs {
        for batch in batches(data.len(), config.batch_size, &mut rng) {
            let x = data.features.select(Axis(0), &batch);
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new();
            let xn = g.input(Shape::new(x.nrows(), x.ncols()));
            let w = g.input(Shape::new(model.weight.nrows(), model.weight.ncols()));
            let b = g.input(Shape::new(1, model.bias.ncols()));
            let logits = g.matmul(xn, w)?;
            let logits = g.add(logits, b)?;
            let loss = softmax_nll(&mut g, logits, &t)?;
            let grads = g.gradients(loss, &[w, b])?;
            let (gw, gb, lv) = {
                let mut bind = Bindings::new();
                bind.bind(xn, &x).bind(w, &model.weight).bind(b, &model.bias);
                let v = g.forward(&bind)?;
                (v.to_owned(grads[0]), v.to_owned(grads[1]), v.scalar(loss))
            };
            if !lv.is_finite() {
                return Err(ClassifyError::NonFinite { epoch });
            }
            adam.update(&mut [&mut model.weight, &mut model.bias], &[gw, gb]);
        }
    }
    Ok(model)
}

/// Argmax of the softmax restricted to `label_space`.
///
/// Classes of the label space that the model has no column for can never be
/// predicted; if none of the label space is known the call fails.
pub fn predict_softmax(
    model: &SoftmaxModel,
    x: ArrayView1<'_, f64>,
    label_space: &[ClassId],
) -> Result<ClassId> {
    if label_space.is_empty() {
        return Err(ClassifyError::EmptyLabelSpace);
    }
    if x.len() != model.d_x() {
        return Err(ClassifyError::DimMismatch(format!(
            "feature of length {}, model expects {}",
            x.len(),
            model.d_x()
        )));
    }
    let scored = label_space.iter().filter_map(|&c| {
        model.column_of(c).map(|k| {
            let score = x.dot(&model.weight.column(k)) + model.bias[[0, k]];
            (c, score)
        })
    });
    argmax_by_score(scored).ok_or(ClassifyError::NoCandidate)
}

impl Predictor for SoftmaxModel {
    fn predict(&self, x: ArrayView1<'_, f64>, label_space: &[ClassId]) -> Result<ClassId> {
        predict_softmax(self, x, label_space)
    }
}

/// Bilinear compatibility `F(x, c) = xᵀ W c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatModel {
    pub w: Array,
}

impl CompatModel {
    pub fn zeros(d_x: usize, d_c: usize) -> Self {
        CompatModel {
            w: Array::zeros((d_x, d_c)),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let layer = Layer {
            weight: self.w.clone(),
            bias: Array::zeros((1, self.w.ncols())),
        };
        MlpParams::linear(layer)?.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let layer = single_layer(nets::load_layers(path)?)?;
        Ok(CompatModel { w: layer.weight })
    }
}

fn embedding_rows(embeddings: &Array, classes: &[ClassId]) -> Result<Array> {
    if let Some(&bad) = classes.iter().find(|&&c| c as usize >= embeddings.nrows()) {
        return Err(ClassifyError::MissingEmbedding(bad));
    }
    let idx: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
    Ok(embeddings.select(Axis(0), &idx))
}

/// Index of the most violating wrong class per row: `argmax_{y≠yₙ} s_y`.
fn max_violators(scores: &Array, targets: &[usize]) -> Vec<Option<usize>> {
    scores
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let mut best: Option<(usize, f64)> = None;
            for (k, &v) in row.iter().enumerate() {
                if k != t && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect()
}

/// Mean structured hinge loss `[Δ + max_{y≠yₙ} xWc(y) − xWc(yₙ)]₊`, with the
/// candidate set being the classes present in `data`.
pub fn compat_loss(
    model: &CompatModel,
    data: &LabeledFeatures,
    embeddings: &Array,
    margin: f64,
) -> Result<f64> {
    let classes = data.classes();
    let emb = embedding_rows(embeddings, &classes)?;
    let scores = data.features.dot(&model.w).dot(&emb.t());
    let targets: Vec<usize> = data
        .labels
        .iter()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    let viol = max_violators(&scores, &targets);
    let total: f64 = scores
        .rows()
        .into_iter()
        .zip(targets.iter().zip(&viol))
        .map(|(row, (&t, v))| v.map_or(0.0, |k| (margin + row[k] - row[t]).max(0.0)))
        .sum();
    Ok(total / data.len() as f64)
}

/// Fits `W` by minimising the max-violator hinge loss with Adam.
///
/// `embeddings` holds one row per class id. Real and synthetic rows are
/// weighted equally.
pub fn train_compat(
    data: &LabeledFeatures,
    embeddings: &Array,
    config: &ClassifierConfig,
) -> Result<CompatModel> {
    let classes = data.classes();
    let emb = embedding_rows(embeddings, &classes)?;
    let targets: Vec<usize> = data
        .labels
        .iter()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    let mut model = CompatModel::zeros(data.features.ncols(), embeddings.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        AdamConfig::new(config.learn_rate, config.beta1, config.beta2),
        &[&model.w],
    );
    let emb_t = emb.t().to_owned();
    for epoch in 0..config.epochs {
        for batch in batches(data.len(), config.batch_size, &mut rng) {
            let x = data.features.select(Axis(0), &batch);
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let scores = x.dot(&model.w).dot(&emb_t);
            let viol = max_violators(&scores, &t);
            let (n, c) = (x.nrows(), emb.nrows());
            let mut true_hot = Array::zeros((n, c));
            let mut viol_hot = Array::zeros((n, c));
            let mut active = Array::zeros((n, 1));
            for r in 0..n {
                true_hot[[r, t[r]]] = 1.0;
                if let Some(k) = viol[r] {
                    viol_hot[[r, k]] = 1.0;
                    active[[r, 0]] = 1.0;
                }
            }
            let mut g = Graph::new();
            let xn = g.input(Shape::new(n, x.ncols()));
            let w = g.input(Shape::new(model.w.nrows(), model.w.ncols()));
            let et = g.constant(emb_t.clone());
            let proj = g.matmul(xn, w)?;
            let s = g.matmul(proj, et)?;
            let th = g.constant(true_hot);
            let vh = g.constant(viol_hot);
            let st = g.mul(s, th)?;
            let st = g.sum_to(st, Shape::new(n, 1))?;
            let sv = g.mul(s, vh)?;
            let sv = g.sum_to(sv, Shape::new(n, 1))?;
            let diff = g.sub(sv, st)?;
            let diff = g.offset(diff, config.margin)?;
            let hinge = g.relu(diff)?;
            let mask = g.constant(active);
            let hinge = g.mul(hinge, mask)?;
            let loss = g.mean(hinge)?;
            let grad = g.gradients(loss, &[w])?[0];
            let (gw, lv) = {
                let mut bind = Bindings::new();
                bind.bind(xn, &x).bind(w, &model.w);
                let v = g.forward(&bind)?;
                (v.to_owned(grad), v.scalar(loss))
            };
            if !lv.is_finite() {
                return Err(ClassifyError::NonFinite { epoch });
            }
            adam.update(&mut [&mut model.w], &[gw]);
        }
    }
    Ok(model)
}

/// Class with the highest compatibility `xᵀ W c(y)`; ties go to the smallest id.
pub fn predict_compat(
    model: &CompatModel,
    x: ArrayView1<'_, f64>,
    candidates: &[(ClassId, ArrayView1<'_, f64>)],
) -> Result<ClassId> {
    if candidates.is_empty() {
        return Err(ClassifyError::EmptyLabelSpace);
    }
    if x.len() != model.w.nrows() {
        return Err(ClassifyError::DimMismatch(format!(
            "feature of length {}, model expects {}",
            x.len(),
            model.w.nrows()
        )));
    }
    let proj: Array1<f64> = x.dot(&model.w);
    let mut scored = Vec::with_capacity(candidates.len());
    for (c, e) in candidates {
        if e.len() != proj.len() {
            return Err(ClassifyError::DimMismatch(format!(
                "embedding of class {c} has length {}, model expects {}",
                e.len(),
                proj.len()
            )));
        }
        scored.push((*c, proj.dot(e)));
    }
    Ok(argmax_by_score(scored.into_iter()).expect("non-empty"))
}

/// A compatibility model together with the class embedding table it ranks.
pub struct CompatPredictor {
    pub model: CompatModel,
    pub embeddings: Array,
}

impl Predictor for CompatPredictor {
    fn predict(&self, x: ArrayView1<'_, f64>, label_space: &[ClassId]) -> Result<ClassId> {
        let candidates = label_space
            .iter()
            .map(|&c| {
                if (c as usize) < self.embeddings.nrows() {
                    Ok((c, self.embeddings.slice(s![c as usize, ..])))
                } else {
                    Err(ClassifyError::MissingEmbedding(c))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        predict_compat(&self.model, x, &candidates)
    }
}
