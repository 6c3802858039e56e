//! Labelled feature container, its `FGZL` binary format, and the synthetic
//! attribute-conditioned dataset used for desk-scale experiments.

use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Array;

pub type ClassId = u32;

const MAGIC: &[u8; 4] = b"FGZL";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("file truncated: {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after dataset")]
    TrailingBytes(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("class {class} has no embedding row ({classes} rows)")]
    MissingEmbedding { class: ClassId, classes: usize },
    #[error("class {0} is both seen and unseen")]
    SplitOverlap(ClassId),
    #[error("{0} class ids are not strictly increasing")]
    SplitOrder(&'static str),
    #[error("{partition}: sample index {index} out of range ({samples} samples)")]
    IndexOutOfRange {
        partition: &'static str,
        index: u32,
        samples: usize,
    },
    #[error("{partition}: sample {index} has label {label} outside the partition's class split")]
    PartitionLabel {
        partition: &'static str,
        index: u32,
        label: ClassId,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DataError {
    /// Stable error code, one per failure family.
    pub fn code(&self) -> &'static str {
        match self {
            DataError::BadMagic(_) => "E_BAD_MAGIC",
            DataError::BadVersion(_) => "E_BAD_VERSION",
            DataError::Truncated(_) => "E_TRUNCATED",
            DataError::TrailingBytes(_) => "E_TRAILING_BYTES",
            DataError::DimMismatch(_) => "E_DIM_MISMATCH",
            DataError::MissingEmbedding { .. } => "E_MISSING_EMBEDDING",
            DataError::SplitOverlap(_) => "E_SPLIT_OVERLAP",
            DataError::SplitOrder(_) => "E_SPLIT_ORDER",
            DataError::IndexOutOfRange { .. } => "E_INDEX_RANGE",
            DataError::PartitionLabel { .. } => "E_PARTITION_LABEL",
            DataError::NonFinite(_) => "E_NON_FINITE",
            DataError::InvalidSpec(_) => "E_INVALID_SPEC",
            DataError::Csv { .. } => "E_CSV",
            DataError::Io(_) => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Sample indices of the three evaluation partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partitions {
    pub train_seen: Vec<u32>,
    pub test_seen: Vec<u32>,
    pub test_unseen: Vec<u32>,
}

/// Features, labels, class embeddings and the seen/unseen split.
///
/// Class ids are dense and 0-based: row `k` of the embedding matrix is the
/// embedding of class `k`. All invariants are checked on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    features: Array2<f32>,
    labels: Vec<ClassId>,
    class_embeddings: Array2<f32>,
    seen_ids: Vec<ClassId>,
    unseen_ids: Vec<ClassId>,
    partitions: Partitions,
}

fn strictly_increasing(ids: &[ClassId]) -> bool {
    ids.windows(2).all(|w| w[0] < w[1])
}

impl FeatureDataset {
    pub fn new(
        features: Array2<f32>,
        labels: Vec<ClassId>,
        class_embeddings: Array2<f32>,
        seen_ids: Vec<ClassId>,
        unseen_ids: Vec<ClassId>,
        partitions: Partitions,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DataError::DimMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let classes = class_embeddings.nrows();
        let missing = |class: ClassId| DataError::MissingEmbedding { class, classes };
        if let Some(&bad) = labels
            .iter()
            .chain(&seen_ids)
            .chain(&unseen_ids)
            .find(|&&l| l as usize >= classes)
        {
            return Err(missing(bad));
        }
        if !strictly_increasing(&seen_ids) {
            return Err(DataError::SplitOrder("seen"));
        }
        if !strictly_increasing(&unseen_ids) {
            return Err(DataError::SplitOrder("unseen"));
        }
        if let Some(&both) = seen_ids.iter().find(|id| unseen_ids.binary_search(id).is_ok()) {
            return Err(DataError::SplitOverlap(both));
        }
        let checks: [(&'static str, &Vec<u32>, &Vec<ClassId>); 3] = [
            ("train_seen", &partitions.train_seen, &seen_ids),
            ("test_seen", &partitions.test_seen, &seen_ids),
            ("test_unseen", &partitions.test_unseen, &unseen_ids),
        ];
        for (partition, indices, allowed) in checks {
            for &index in indices {
                let label = *labels.get(index as usize).ok_or(DataError::IndexOutOfRange {
                    partition,
                    index,
                    samples: labels.len(),
                })?;
                if allowed.binary_search(&label).is_err() {
                    return Err(DataError::PartitionLabel {
                        partition,
                        index,
                        label,
                    });
                }
            }
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("features"));
        }
        if !class_embeddings.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("class embeddings"));
        }
        Ok(FeatureDataset {
            features,
            labels,
            class_embeddings,
            seen_ids,
            unseen_ids,
            partitions,
        })
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn class_embeddings(&self) -> &Array2<f32> {
        &self.class_embeddings
    }

    pub fn seen_ids(&self) -> &[ClassId] {
        &self.seen_ids
    }

    pub fn unseen_ids(&self) -> &[ClassId] {
        &self.unseen_ids
    }

    /// Seen followed by unseen ids, sorted.
    pub fn all_ids(&self) -> Vec<ClassId> {
        let mut ids: Vec<_> = self.seen_ids.iter().chain(&self.unseen_ids).copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn partitions(&self) -> &Partitions {
        &self.partitions
    }

    pub fn d_x(&self) -> usize {
        self.features.ncols()
    }

    pub fn d_c(&self) -> usize {
        self.class_embeddings.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_embeddings.nrows()
    }

    /// Selected feature rows widened to `f64`.
    pub fn rows(&self, indices: &[u32]) -> Array {
        let idx: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        self.features.select(Axis(0), &idx).mapv(f64::from)
    }

    pub fn labels_of(&self, indices: &[u32]) -> Vec<ClassId> {
        indices.iter().map(|&i| self.labels[i as usize]).collect()
    }

    /// Embedding rows for a list of classes, widened to `f64`.
    pub fn embeddings_for(&self, classes: &[ClassId]) -> Array {
        let idx: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
        self.class_embeddings.select(Axis(0), &idx).mapv(f64::from)
    }

    pub fn embedding(&self, class: ClassId) -> Option<Vec<f64>> {
        (class < self.num_classes() as u32).then(|| {
            self.class_embeddings
                .row(class as usize)
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        for v in [
            self.d_x(),
            self.d_c(),
            self.labels.len(),
            self.num_classes(),
            self.seen_ids.len(),
            self.unseen_ids.len(),
        ] {
            out.extend((v as u32).to_le_bytes());
        }
        out.extend(self.features.iter().flat_map(|v| v.to_le_bytes()));
        out.extend(self.labels.iter().flat_map(|v| v.to_le_bytes()));
        out.extend(self.class_embeddings.iter().flat_map(|v| v.to_le_bytes()));
        out.extend(self.seen_ids.iter().flat_map(|v| v.to_le_bytes()));
        out.extend(self.unseen_ids.iter().flat_map(|v| v.to_le_bytes()));
        for part in [
            &self.partitions.train_seen,
            &self.partitions.test_seen,
            &self.partitions.test_unseen,
        ] {
            out.extend((part.len() as u32).to_le_bytes());
            out.extend(part.iter().flat_map(|v| v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(DataError::BadVersion(version));
        }
        let d_x = r.u32("header")? as usize;
        let d_c = r.u32("header")? as usize;
        let n = r.u32("header")? as usize;
        let classes = r.u32("header")? as usize;
        let k = r.u32("header")? as usize;
        let l = r.u32("header")? as usize;
        let features = r.f32s(n, d_x, "features")?;
        let labels = r.u32s(n, "labels")?;
        let embeddings = r.f32s(classes, d_c, "embeddings")?;
        let seen = r.u32s(k, "seen ids")?;
        let unseen = r.u32s(l, "unseen ids")?;
        let mut parts = Vec::with_capacity(3);
        for name in ["train_seen", "test_seen", "test_unseen"] {
            let count = r.u32(name)? as usize;
            parts.push(r.u32s(count, name)?);
        }
        if r.pos != bytes.len() {
            return Err(DataError::TrailingBytes(bytes.len() - r.pos));
        }
        let test_unseen = parts.pop().unwrap();
        let test_seen = parts.pop().unwrap();
        let train_seen = parts.pop().unwrap();
        FeatureDataset::new(
            features,
            labels,
            embeddings,
            seen,
            unseen,
            Partitions {
                train_seen,
                test_seen,
                test_unseen,
            },
        )
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DataError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn words(&mut self, count: usize, what: &'static str) -> Result<&'a [u8]> {
        let n = count.checked_mul(4).ok_or(DataError::Truncated(what))?;
        self.take(n, what)
    }

    fn u32s(&mut self, count: usize, what: &'static str) -> Result<Vec<u32>> {
        Ok(self
            .words(count, what)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<Array2<f32>> {
        let count = rows.checked_mul(cols).ok_or(DataError::Truncated(what))?;
        let values = self
            .words(count, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("sized above"))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    FeatureDataset::from_bytes(&fs::read(path)?)
}

pub fn save_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

/// Reads class embeddings from CSV: one row per class in id order,
/// comma-separated numbers. Blank lines and `#` comments are skipped.
pub fn read_embeddings_csv<R: BufRead>(reader: R) -> Result<Array2<f32>> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let row = text
            .split(',')
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DataError::Csv {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DataError::Csv {
                    line: i + 1,
                    msg: format!("{} fields, expected {}", row.len(), first.len()),
                });
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Csv {
                line: i + 1,
                msg: "non-finite value".into(),
            });
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), cols), flat).expect("rows checked"))
}

/// Reads the sidecar class-name table: line `k` names class `k`.
pub fn read_class_names<R: BufRead>(reader: R) -> Result<Vec<String>> {
    reader
        .lines()
        .map(|l| Ok(l?.trim_end().to_string()))
        .collect()
}

/// Parameters of the synthetic attribute-conditioned dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_x: usize,
    pub d_c: usize,
    /// Training samples per seen class and test samples per unseen class.
    pub samples_per_class: usize,
    /// Held-out test samples per seen class.
    pub test_seen_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Held-out seen-class test samples default to a fifth of the training count.
    pub fn new(n_seen: usize, n_unseen: usize, d_x: usize, d_c: usize, samples_per_class: usize) -> Self {
        SynthSpec {
            n_seen,
            n_unseen,
            d_x,
            d_c,
            samples_per_class,
            test_seen_per_class: (samples_per_class / 5).max(1),
            noise_sigma: 0.25,
            seed: 0,
        }
    }

    /// The 10 seen / 5 unseen, 32-d feature, 8-d attribute fixture.
    pub fn fixture(seed: u64) -> Self {
        SynthSpec {
            seed,
            ..SynthSpec::new(10, 5, 32, 8, 100)
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("n_unseen", self.n_unseen),
            ("d_x", self.d_x),
            ("d_c", self.d_c),
            ("samples_per_class", self.samples_per_class),
            ("test_seen_per_class", self.test_seen_per_class),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::InvalidSpec(format!("{name} must be positive")));
        }
        if self.n_seen < 2 {
            return Err(DataError::InvalidSpec("n_seen must be at least 2".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DataError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draws a dataset where class attributes determine the feature distribution.
///
/// Attributes are `U(0,1)^d_c`; a shared non-negative map `A` sends them to
/// feature space and samples are `ReLU(c·A + ε)`, `ε ~ N(0, σ²)`. Classes
/// `0..n_seen` are seen and the rest unseen; unseen classes only get test rows.
pub fn make_synthetic(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map = Array::from_shape_simple_fn((spec.d_c, spec.d_x), || rng.random::<f64>());
    let n_classes = spec.n_seen + spec.n_unseen;
    let attrs = Array::from_shape_simple_fn((n_classes, spec.d_c), || rng.random::<f64>());
    let means = attrs.dot(&map);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");

    let mut rows: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut parts = Partitions::default();
    let mut draw = |class: usize, count: usize, part: &mut Vec<u32>| {
        for _ in 0..count {
            part.push(labels.len() as u32);
            labels.push(class as ClassId);
            rows.extend(
                means
                    .row(class)
                    .iter()
                    .map(|&m| (m + noise.sample(&mut rng)).max(0.0) as f32),
            );
        }
    };
    for class in 0..spec.n_seen {
        draw(class, spec.samples_per_class, &mut parts.train_seen);
    }
    for class in 0..spec.n_seen {
        draw(class, spec.test_seen_per_class, &mut parts.test_seen);
    }
    for class in spec.n_seen..n_classes {
        draw(class, spec.samples_per_class, &mut parts.test_unseen);
    }
    let features = Array2::from_shape_vec((labels.len(), spec.d_x), rows).expect("row-major");
    FeatureDataset::new(
        features,
        labels,
        attrs.mapv(|v| v as f32),
        (0..spec.n_seen as ClassId).collect(),
        (spec.n_seen as ClassId..n_classes as ClassId).collect(),
        parts,
    )
}
