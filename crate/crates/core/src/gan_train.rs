//! Adversarial objectives, training loops and unseen-class feature synthesis.
//!
//! Three conditional generators are supported: `f-GAN` (sigmoid
//! discriminator, log loss), `f-WGAN` (critic with gradient penalty) and
//! `f-CLSWGAN` (`f-WGAN` plus a frozen softmax classifier's NLL on generated
//! features). `f-GMMN` trains the same generator against an MMD loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Bindings, Graph, NodeRef, Shape};
use crate::classify::{self, ClassifierConfig, ClassifyError, LabeledFeatures, SoftmaxModel};
use crate::data::{ClassId, DataError, FeatureDataset};
use crate::nets::{
    self, init_params, MlpNodes, MlpParams, NetError, NetRole, NetSpec, NetVariant,
};
use crate::optim::{Adam, AdamConfig};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-8;
pub const DEFAULT_LAMBDA_GP: f64 = 10.0;
pub const DEFAULT_BETA_CLS: f64 = 0.01;
pub const DEFAULT_N_SYN: usize = 300;
pub const DEFAULT_MMD_BANDWIDTHS: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 40.0];

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        what: &'static str,
    },
    #[error("class {0} has no embedding")]
    UnknownClass(ClassId),
    #[error("{0}")]
    Empty(&'static str),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, GanError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    FGan,
    FWgan,
    FClsWgan,
    FGmmn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FGan, Variant::FWgan, Variant::FClsWgan, Variant::FGmmn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FGan => "f-gan",
            Variant::FWgan => "f-wgan",
            Variant::FClsWgan => "f-clswgan",
            Variant::FGmmn => "f-gmmn",
        }
    }

    pub fn net_variant(self) -> NetVariant {
        match self {
            Variant::FGan => NetVariant::Gan,
            _ => NetVariant::Wgan,
        }
    }

    fn is_wasserstein(self) -> bool {
        matches!(self, Variant::FWgan | Variant::FClsWgan)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected f-gan, f-wgan, f-clswgan or f-gmmn)"))
    }
}

/// Hyper-parameters of one generator training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda_gp: f64,
    pub beta_cls: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Critic updates per generator update (Wasserstein variants only).
    pub critic_steps: usize,
    /// Critic updates run once before the first generator update.
    pub critic_warmup: usize,
    pub learn_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub hidden_g: usize,
    /// Discriminator width; `None` picks 1024 for f-GAN and 4096 otherwise.
    pub hidden_d: Option<usize>,
    /// Noise width; `None` matches the class-embedding width.
    pub noise_dim: Option<usize>,
    pub leaky_slope: f64,
    pub mmd_bandwidths: Vec<f64>,
    /// Settings for pretraining the frozen classifier of f-CLSWGAN.
    pub cls: ClassifierConfig,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            lambda_gp: DEFAULT_LAMBDA_GP,
            beta_cls: DEFAULT_BETA_CLS,
            epochs: 50,
            batch_size: 64,
            critic_steps: 5,
            critic_warmup: 0,
            learn_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            seed: 0,
            hidden_g: nets::DEFAULT_HIDDEN_G,
            hidden_d: None,
            noise_dim: None,
            leaky_slope: nets::DEFAULT_LEAKY_SLOPE,
            mmd_bandwidths: DEFAULT_MMD_BANDWIDTHS.to_vec(),
            cls: ClassifierConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GanError::Config(m.to_string()));
        if !(self.lambda_gp >= 0.0) {
            return fail("lambda_gp must be >= 0");
        }
        if !(self.beta_cls >= 0.0) {
            return fail("beta_cls must be >= 0");
        }
        if self.critic_steps < 1 {
            return fail("critic_steps must be >= 1");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2");
        }
        if !(self.learn_rate > 0.0) {
            return fail("learn_rate must be > 0");
        }
        if self.hidden_g == 0 || self.hidden_d == Some(0) || self.noise_dim == Some(0) {
            return fail("layer widths must be positive");
        }
        if self.variant == Variant::FGmmn
            && (self.mmd_bandwidths.is_empty() || self.mmd_bandwidths.iter().any(|&b| !(b > 0.0)))
        {
            return fail("mmd_bandwidths must be a non-empty list of positive values");
        }
        Ok(())
    }

    pub fn net_spec(&self, d_x: usize, d_c: usize) -> NetSpec {
        let mut spec = NetSpec::new(d_x, d_c, self.variant.net_variant());
        spec.hidden_g = self.hidden_g;
        if let Some(h) = self.hidden_d {
            spec.hidden_d = h;
        }
        if let Some(z) = self.noise_dim {
            spec.d_z = z;
        }
        spec.leaky_slope = self.leaky_slope;
        spec
    }
}

/// Scores a batch of `(x, c)` pairs as a `B×1` node.
pub trait Critic {
    fn score(&self, g: &mut Graph, x: NodeRef, c: NodeRef) -> Result<NodeRef>;
}

impl<F> Critic for F
where
    F: Fn(&mut Graph, NodeRef, NodeRef) -> Result<NodeRef>,
{
    fn score(&self, g: &mut Graph, x: NodeRef, c: NodeRef) -> Result<NodeRef> {
        self(g, x, c)
    }
}

/// The conditional MLP discriminator as a [`Critic`].
pub struct MlpCritic<'n>(pub &'n MlpNodes);

impl Critic for MlpCritic<'_> {
    fn score(&self, g: &mut Graph, x: NodeRef, c: NodeRef) -> Result<NodeRef> {
        Ok(nets::discriminator_forward(g, self.0, x, c)?)
    }
}

fn mean_log(g: &mut Graph, p: NodeRef) -> Result<NodeRef> {
    let p = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let l = g.log(p)?;
    Ok(g.mean(l)?)
}

/// Conditional GAN losses from a probability-valued discriminator.
///
/// `loss_d = −E[log D(x,c)] − E[log(1 − D(x̃,c))]`, `loss_g = −E[log D(x̃,c)]`.
pub fn gan_losses(
    g: &mut Graph,
    disc: &dyn Critic,
    x_real: NodeRef,
    x_fake: NodeRef,
    c: NodeRef,
) -> Result<(NodeRef, NodeRef)> {
    let d_real = disc.score(g, x_real, c)?;
    let d_fake = disc.score(g, x_fake, c)?;
    let real_term = mean_log(g, d_real)?;
    let one_minus = g.neg(d_fake)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let fake_term = mean_log(g, one_minus)?;
    let sum = g.add(real_term, fake_term)?;
    let loss_d = g.neg(sum)?;
    let fool = mean_log(g, d_fake)?;
    let loss_g = g.neg(fool)?;
    Ok((loss_d, loss_g))
}

/// Gradient-penalty term and the interpolates it was evaluated at.
#[derive(Clone, Copy, Debug)]
pub struct Penalty {
    pub value: NodeRef,
    pub interpolates: NodeRef,
}

/// `E[(‖∇_x̂ D(x̂,c)‖₂ − 1)²]` with `x̂ = αx + (1−α)x̃`, one `α ~ U(0,1)` per row.
///
/// The gradient is taken with respect to `x̂` only; the result stays
/// differentiable with respect to the critic's parameters.
pub fn gradient_penalty<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &dyn Critic,
    x_real: NodeRef,
    x_fake: NodeRef,
    c: NodeRef,
    rng: &mut R,
) -> Result<Penalty> {
    let rows = x_real.shape().rows;
    let alpha = Array::from_shape_simple_fn((rows, 1), || rng.random::<f64>());
    let alpha = g.constant(alpha);
    let diff = g.sub(x_real, x_fake)?;
    let step = g.mul(alpha, diff)?;
    let x_hat = g.add(x_fake, step)?;
    let score = critic.score(g, x_hat, c)?;
    let total = g.sum(score)?;
    let grad = g.gradients(total, &[x_hat])?[0];
    let norm = g.row_norm(grad)?;
    let dev = g.offset(norm, -1.0)?;
    let sq = g.square(dev)?;
    Ok(Penalty {
        value: g.mean(sq)?,
        interpolates: x_hat,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct WganLosses {
    pub loss_d: NodeRef,
    pub loss_g: NodeRef,
    pub penalty: Penalty,
}

/// `loss_d = E[D(x̃,c)] − E[D(x,c)] + λ·GP`, `loss_g = −E[D(x̃,c)]`.
pub fn wgan_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    critic: &dyn Critic,
    x_real: NodeRef,
    x_fake: NodeRef,
    c: NodeRef,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<WganLosses> {
    let d_real = critic.score(g, x_real, c)?;
    let d_fake = critic.score(g, x_fake, c)?;
    let mean_real = g.mean(d_real)?;
    let mean_fake = g.mean(d_fake)?;
    let wasserstein = g.sub(mean_fake, mean_real)?;
    let penalty = gradient_penalty(g, critic, x_real, x_fake, c, rng)?;
    let weighted = g.scale(penalty.value, lambda_gp)?;
    let loss_d = g.add(wasserstein, weighted)?;
    let loss_g = g.neg(mean_fake)?;
    Ok(WganLosses {
        loss_d,
        loss_g,
        penalty,
    })
}

/// NLL of `labels` for generated features under a frozen softmax classifier.
/// The classifier enters the graph as constants, so gradients reach only `x_fake`.
pub fn cls_loss(
    g: &mut Graph,
    classifier: &SoftmaxModel,
    x_fake: NodeRef,
    labels: &[ClassId],
) -> Result<NodeRef> {
    let targets = labels
        .iter()
        .map(|&l| classifier.column_of(l).ok_or(ClassifyError::UnknownLabel(l)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let w = g.constant(classifier.weight.clone());
    let b = g.constant(classifier.bias.clone());
    let logits = g.matmul(x_fake, w)?;
    let logits = g.add(logits, b)?;
    Ok(classify::softmax_nll(g, logits, &targets)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdEstimator {
    /// V-statistic including the diagonal kernel terms; exactly 0 for equal batches.
    Biased,
    /// U-statistic excluding the diagonal; needs two rows per batch.
    Unbiased,
}

fn sq_distances(g: &mut Graph, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
    let (n, m) = (a.shape().rows, b.shape().rows);
    let a2 = g.square(a)?;
    let a2 = g.sum_to(a2, Shape::new(n, 1))?;
    let b2 = g.square(b)?;
    let b2 = g.sum_to(b2, Shape::new(m, 1))?;
    let b2 = g.transpose(b2)?;
    let bt = g.transpose(b)?;
    let ab = g.matmul(a, bt)?;
    let ab = g.scale(ab, -2.0)?;
    let d = g.add(a2, b2)?;
    Ok(g.add(d, ab)?)
}

fn kernel_sum(g: &mut Graph, d2: NodeRef, bandwidths: &[f64]) -> Result<NodeRef> {
    let mut total: Option<NodeRef> = None;
    for &bw in bandwidths {
        let k = g.scale(d2, -1.0 / (2.0 * bw * bw))?;
        let k = g.exp(k)?;
        total = Some(match total {
            Some(t) => g.add(t, k)?,
            None => k,
        });
    }
    Ok(total.expect("bandwidths checked non-empty"))
}

/// Squared MMD between two batches under a sum of Gaussian kernels
/// `Σ_σ exp(−‖a−b‖²/(2σ²))`.
pub fn mmd_loss(
    g: &mut Graph,
    x: NodeRef,
    y: NodeRef,
    bandwidths: &[f64],
    estimator: MmdEstimator,
) -> Result<NodeRef> {
    if bandwidths.is_empty() {
        return Err(GanError::Config("mmd needs at least one bandwidth".into()));
    }
    let (n, m) = (x.shape().rows, y.shape().rows);
    let min_rows = if estimator == MmdEstimator::Unbiased { 2 } else { 1 };
    if n < min_rows || m < min_rows {
        return Err(GanError::Empty("mmd batches are too small"));
    }
    let kxx = sq_distances(g, x, x)?;
    let kxx = kernel_sum(g, kxx, bandwidths)?;
    let kyy = sq_distances(g, y, y)?;
    let kyy = kernel_sum(g, kyy, bandwidths)?;
    let kxy = sq_distances(g, x, y)?;
    let kxy = kernel_sum(g, kxy, bandwidths)?;
    let diag = bandwidths.len() as f64;
    let within = |g: &mut Graph, k: NodeRef, rows: usize| -> Result<NodeRef> {
        let s = g.sum(k)?;
        let r = rows as f64;
        Ok(match estimator {
            MmdEstimator::Biased => g.scale(s, 1.0 / (r * r))?,
            MmdEstimator::Unbiased => {
                let s = g.offset(s, -diag * r)?;
                g.scale(s, 1.0 / (r * (r - 1.0)))?
            }
        })
    };
    let txx = within(g, kxx, n)?;
    let tyy = within(g, kyy, m)?;
    let txy = g.mean(kxy)?;
    let txy = g.scale(txy, -2.0)?;
    let t = g.add(txx, tyy)?;
    Ok(g.add(t, txy)?)
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_cls: f64,
    pub gp: f64,
}

impl LogRecord {
    /// `epoch,step,loss_d,loss_g,loss_cls,gp`
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.loss_d, self.loss_g, self.loss_cls, self.gp
        )
    }

    fn is_finite(&self) -> bool {
        [self.loss_d, self.loss_g, self.loss_cls, self.gp]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct TrainOutcome {
    pub generator: MlpParams,
    /// Absent for f-GMMN.
    pub discriminator: Option<MlpParams>,
    /// The frozen classifier used by f-CLSWGAN.
    pub classifier: Option<SoftmaxModel>,
    pub log: Vec<LogRecord>,
}

/// Softmax classifier on the real seen-class training features.
pub fn pretrain_cls(ds: &FeatureDataset, config: &ClassifierConfig) -> Result<SoftmaxModel> {
    let train = &ds.partitions().train_seen;
    if train.is_empty() {
        return Err(GanError::Empty("train_seen partition is empty"));
    }
    let data = LabeledFeatures::from_partition(ds, train);
    Ok(classify::train_softmax(&data, ds.seen_ids(), config)?)
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array {
    Array::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

struct Batch {
    x: Array,
    c: Array,
    labels: Vec<ClassId>,
}

struct Sampler<'d> {
    ds: &'d FeatureDataset,
    train: &'d [u32],
    by_class: BTreeMap<ClassId, Vec<u32>>,
    embeddings: Array,
}

impl<'d> Sampler<'d> {
    fn new(ds: &'d FeatureDataset) -> Result<Self> {
        let train = ds.partitions().train_seen.as_slice();
        if train.is_empty() {
            return Err(GanError::Empty("train_seen partition is empty"));
        }
        let mut by_class: BTreeMap<ClassId, Vec<u32>> = BTreeMap::new();
        for &i in train {
            by_class.entry(ds.labels()[i as usize]).or_default().push(i);
        }
        Ok(Sampler {
            ds,
            train,
            by_class,
            embeddings: ds.class_embeddings().mapv(f64::from),
        })
    }

    fn make(&self, idx: Vec<u32>) -> Batch {
        let labels = self.ds.labels_of(&idx);
        let rows: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        Batch {
            x: self.ds.rows(&idx),
            c: self.embeddings.select(Axis(0), &rows),
            labels,
        }
    }

    /// Uniform draw (with replacement) over all seen training rows.
    fn uniform<R: Rng>(&self, rng: &mut R, size: usize) -> Batch {
        let idx = (0..size)
            .map(|_| self.train[rng.random_range(0..self.train.len())])
            .collect();
        self.make(idx)
    }

    /// A batch drawn from a single uniformly chosen seen class.
    fn single_class<R: Rng>(&self, rng: &mut R, size: usize) -> Batch {
        let pick = rng.random_range(0..self.by_class.len());
        let rows = self.by_class.values().nth(pick).expect("in range");
        let idx = (0..size)
            .map(|_| rows[rng.random_range(0..rows.len())])
            .collect();
        self.make(idx)
    }

    /// Per-dimension scale `1/std` of the training features (1 where std is 0).
    fn inverse_std(&self) -> Array {
        let x = self.ds.rows(self.train);
        let std = x.std_axis(Axis(0), 0.0);
        std.mapv(|s| if s > 0.0 { 1.0 / s } else { 1.0 })
            .insert_axis(Axis(0))
    }
}

fn grads_of(values: &crate::autodiff::Values<'_>, nodes: &[NodeRef]) -> Vec<Array> {
    nodes.iter().map(|&n| values.to_owned(n)).collect()
}

/// Trains a conditional feature generator on the seen-class training rows.
///
/// Wasserstein variants alternate `critic_steps` critic updates with one
/// generator update; f-GAN alternates 1:1; f-GMMN has no discriminator. One
/// epoch is `ceil(|train_seen| / batch_size)` generator updates. For
/// f-CLSWGAN the frozen classifier is `pretrained`, or is trained here.
pub fn train(
    config: &TrainConfig,
    ds: &FeatureDataset,
    pretrained: Option<&SoftmaxModel>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sampler = Sampler::new(ds)?;
    let spec = config.net_spec(ds.d_x(), ds.d_c());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = init_params(&spec, NetRole::Generator, &mut rng);
    let mut disc = init_params(&spec, NetRole::Discriminator, &mut rng);
    let classifier = match (config.variant, pretrained) {
        (Variant::FClsWgan, Some(m)) => Some(m.clone()),
        (Variant::FClsWgan, None) => Some(pretrain_cls(ds, &config.cls)?),
        _ => None,
    };
    let adam_cfg = AdamConfig::new(config.learn_rate, config.adam_beta1, config.adam_beta2);
    let mut adam_g = Adam::new(adam_cfg, &gen.tensors());
    let mut adam_d = Adam::new(adam_cfg, &disc.tensors());
    let inv_std = (config.variant == Variant::FGmmn).then(|| sampler.inverse_std());

    let b = config.batch_size;
    let per_epoch = sampler.train.len().div_ceil(b);
    let critic_steps = match config.variant {
        Variant::FGan => 1,
        Variant::FWgan | Variant::FClsWgan => config.critic_steps,
        Variant::FGmmn => 0,
    };
    if critic_steps > 0 && config.epochs > 0 {
        for _ in 0..config.critic_warmup {
            let batch = sampler.uniform(&mut rng, b);
            let z = normal_matrix(&mut rng, b, spec.d_z);
            let (grads, loss_d, gp) = critic_step(config, &gen, &disc, &batch, &z, &mut rng)?;
            if !(loss_d.is_finite() && gp.is_finite()) {
                return Err(GanError::NonFinite {
                    epoch: 0,
                    step: 0,
                    what: "discriminator loss",
                });
            }
            adam_d.update(&mut disc.tensors_mut(), &grads);
        }
    }
    let mut log = Vec::with_capacity(config.epochs * per_epoch);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for _ in 0..per_epoch {
            let mut rec = LogRecord {
                epoch,
                step,
                loss_d: 0.0,
                loss_g: 0.0,
                loss_cls: 0.0,
                gp: 0.0,
            };
            for _ in 0..critic_steps {
                let batch = sampler.uniform(&mut rng, b);
                let z = normal_matrix(&mut rng, b, spec.d_z);
                let (grads, loss_d, gp) =
                    critic_step(config, &gen, &disc, &batch, &z, &mut rng)?;
                rec.loss_d = loss_d;
                rec.gp = gp;
                if !(loss_d.is_finite() && gp.is_finite()) {
                    return Err(GanError::NonFinite {
                        epoch,
                        step,
                        what: "discriminator loss",
                    });
                }
                adam_d.update(&mut disc.tensors_mut(), &grads);
            }
            let batch = match config.variant {
                Variant::FGmmn => sampler.single_class(&mut rng, b),
                _ => sampler.uniform(&mut rng, b),
            };
            let z = normal_matrix(&mut rng, b, spec.d_z);
            let (grads, loss_g, loss_cls) = generator_step(
                config,
                &gen,
                &disc,
                classifier.as_ref(),
                inv_std.as_ref(),
                &batch,
                &z,
            )?;
            rec.loss_g = loss_g;
            rec.loss_cls = loss_cls;
            if !rec.is_finite() {
                return Err(GanError::NonFinite {
                    epoch,
                    step,
                    what: "generator loss",
                });
            }
            adam_g.update(&mut gen.tensors_mut(), &grads);
            log.push(rec);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        generator: gen,
        discriminator: (config.variant != Variant::FGmmn).then_some(disc),
        classifier,
        log,
    })
}

fn batch_inputs<'a>(
    g: &mut Graph,
    bind: &mut Bindings<'a>,
    batch: &'a Batch,
    z: &'a Array,
) -> (NodeRef, NodeRef, NodeRef) {
    let x = g.input(Shape::new(batch.x.nrows(), batch.x.ncols()));
    let c = g.input(Shape::new(batch.c.nrows(), batch.c.ncols()));
    let zn = g.input(Shape::new(z.nrows(), z.ncols()));
    bind.bind(x, &batch.x).bind(c, &batch.c).bind(zn, z);
    (x, c, zn)
}

/// Returns discriminator gradients, its loss and the gradient penalty.
fn critic_step<R: Rng>(
    config: &TrainConfig,
    gen: &MlpParams,
    disc: &MlpParams,
    batch: &Batch,
    z: &Array,
    rng: &mut R,
) -> Result<(Vec<Array>, f64, f64)> {
    let mut g = Graph::new();
    let mut bind = Bindings::new();
    let gn = gen.attach(&mut g, &mut bind);
    let dn = disc.attach(&mut g, &mut bind);
    let (x, c, zn) = batch_inputs(&mut g, &mut bind, batch, z);
    let fake = nets::generator_forward(&mut g, &gn, zn, c)?;
    let critic = MlpCritic(&dn);
    let (loss_d, gp) = if config.variant.is_wasserstein() {
        let l = wgan_losses(&mut g, &critic, x, fake, c, config.lambda_gp, rng)?;
        (l.loss_d, Some(l.penalty.value))
    } else {
        (gan_losses(&mut g, &critic, x, fake, c)?.0, None)
    };
    let grads = g.gradients(loss_d, &dn.params())?;
    let v = g.forward(&bind)?;
    Ok((
        grads_of(&v, &grads),
        v.scalar(loss_d),
        gp.map_or(0.0, |n| v.scalar(n)),
    ))
}

/// Returns generator gradients, the adversarial (or MMD) loss and the
/// classification loss.
fn generator_step(
    config: &TrainConfig,
    gen: &MlpParams,
    disc: &MlpParams,
    classifier: Option<&SoftmaxModel>,
    inv_std: Option<&Array>,
    batch: &Batch,
    z: &Array,
) -> Result<(Vec<Array>, f64, f64)> {
    let mut g = Graph::new();
    let mut bind = Bindings::new();
    let gn = gen.attach(&mut g, &mut bind);
    let (x, c, zn) = batch_inputs(&mut g, &mut bind, batch, z);
    let fake = nets::generator_forward(&mut g, &gn, zn, c)?;
    let adversarial = match config.variant {
        Variant::FGmmn => {
            let scale = g.constant(inv_std.expect("set for f-gmmn").clone());
            let xs = g.mul(x, scale)?;
            let fs = g.mul(fake, scale)?;
            mmd_loss(&mut g, xs, fs, &config.mmd_bandwidths, MmdEstimator::Unbiased)?
        }
        variant => {
            let dn = disc.attach(&mut g, &mut bind);
            let critic = MlpCritic(&dn);
            if variant.is_wasserstein() {
                let d_fake = critic.score(&mut g, fake, c)?;
                let m = g.mean(d_fake)?;
                g.neg(m)?
            } else {
                let d_fake = critic.score(&mut g, fake, c)?;
                let l = mean_log(&mut g, d_fake)?;
                g.neg(l)?
            }
        }
    };
    let (total, cls) = match classifier {
        Some(model) => {
            let cls = cls_loss(&mut g, model, fake, &batch.labels)?;
            let weighted = g.scale(cls, config.beta_cls)?;
            (g.add(adversarial, weighted)?, Some(cls))
        }
        None => (adversarial, None),
    };
    let grads = g.gradients(total, &gn.params())?;
    let v = g.forward(&bind)?;
    Ok((
        grads_of(&v, &grads),
        v.scalar(adversarial),
        cls.map_or(0.0, |n| v.scalar(n)),
    ))
}

/// Generated `(feature, label)` pairs, `n_syn` per target class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub features: Array2<f32>,
    pub labels: Vec<ClassId>,
    pub n_syn: usize,
}

const SYNTH_MAGIC: &[u8; 4] = b"FGSY";
const SYNTH_VERSION: u16 = 1;

impl SynthSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `FGSY` file: magic, version u16, d_x u32, rows u32, n_syn u32, then
    /// row-major f32 features and u32 labels, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = SYNTH_MAGIC.to_vec();
        out.extend(SYNTH_VERSION.to_le_bytes());
        for v in [self.features.ncols(), self.labels.len(), self.n_syn] {
            out.extend((v as u32).to_le_bytes());
        }
        out.extend(self.features.iter().flat_map(|v| v.to_le_bytes()));
        out.extend(self.labels.iter().flat_map(|v| v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, DataError> {
        let take = |at: usize, n: usize, what| {
            bytes
                .get(at..at.checked_add(n).ok_or(DataError::Truncated(what))?)
                .ok_or(DataError::Truncated(what))
        };
        let magic: [u8; 4] = take(0, 4, "magic")?.try_into().unwrap();
        if &magic != SYNTH_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(take(4, 2, "version")?.try_into().unwrap());
        if version != SYNTH_VERSION {
            return Err(DataError::BadVersion(version));
        }
        let word = |at| -> std::result::Result<usize, DataError> {
            Ok(u32::from_le_bytes(take(at, 4, "header")?.try_into().unwrap()) as usize)
        };
        let (d_x, rows, n_syn) = (word(6)?, word(10)?, word(14)?);
        let nf = rows
            .checked_mul(d_x)
            .and_then(|n| n.checked_mul(4))
            .ok_or(DataError::Truncated("features"))?;
        let feat = take(18, nf, "features")?;
        let lab = take(18 + nf, rows * 4, "labels")?;
        let end = 18 + nf + rows * 4;
        if end != bytes.len() {
            return Err(DataError::TrailingBytes(bytes.len() - end));
        }
        let features: Vec<f32> = feat
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = lab
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let features = Array2::from_shape_vec((rows, d_x), features).expect("sized above");
        if !features.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinite("synthetic features"));
        }
        Ok(SynthSet {
            features,
            labels,
            n_syn,
        })
    }
}

/// Draws `n_syn` features per target class by resampling `z ~ N(0, I)`.
///
/// Classes are emitted in ascending id order, samples in draw order.
/// `embeddings` holds one row per class id.
pub fn synthesize_features<R: Rng + ?Sized>(
    generator: &MlpParams,
    embeddings: &Array2<f32>,
    classes: &[ClassId],
    n_syn: usize,
    rng: &mut R,
) -> Result<SynthSet> {
    if n_syn == 0 {
        return Err(GanError::Config("n_syn must be >= 1".into()));
    }
    let d_c = embeddings.ncols();
    let d_z = generator
        .input_dim()
        .checked_sub(d_c)
        .filter(|&d| d > 0)
        .ok_or_else(|| {
            GanError::Config(format!(
                "generator input width {} cannot hold a {d_c}-d embedding plus noise",
                generator.input_dim()
            ))
        })?;
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&c| c as usize >= embeddings.nrows()) {
        return Err(GanError::UnknownClass(bad));
    }
    let d_x = generator.output_dim();
    let mut features = Array2::<f32>::zeros((sorted.len() * n_syn, d_x));
    let mut labels = Vec::with_capacity(sorted.len() * n_syn);
    for (k, &class) in sorted.iter().enumerate() {
        let z = normal_matrix(rng, n_syn, d_z);
        let row = embeddings.row(class as usize).mapv(f64::from);
        let c = row
            .broadcast((n_syn, d_c))
            .expect("row broadcast")
            .to_owned();
        let input = ndarray::concatenate(Axis(1), &[z.view(), c.view()]).expect("same rows");
        let out = generator.apply(&input)?;
        features
            .slice_mut(ndarray::s![k * n_syn..(k + 1) * n_syn, ..])
            .assign(&out.mapv(|v| v as f32));
        labels.extend(std::iter::repeat_n(class, n_syn));
    }
    Ok(SynthSet {
        features,
        labels,
        n_syn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn inputs(g: &mut Graph, rows: usize, cols: usize) -> (NodeRef, NodeRef, NodeRef) {
        (
            g.input(Shape::new(rows, cols)),
            g.input(Shape::new(rows, cols)),
            g.input(Shape::new(rows, 1)),
        )
    }

    fn eval(g: &Graph, nodes: [NodeRef; 3], vals: [&Array; 3], out: &[NodeRef]) -> Vec<f64> {
        let mut b = Bindings::new();
        for (n, v) in nodes.iter().zip(vals) {
            b.bind(*n, v);
        }
        let v = g.forward(&b).unwrap();
        out.iter().map(|&n| v.scalar(n)).collect()
    }

    /// Critic with a fixed per-row output: a constant plus `k · x₁`.
    fn affine(k: f64, base: f64) -> impl Fn(&mut Graph, NodeRef, NodeRef) -> Result<NodeRef> {
        move |g: &mut Graph, x: NodeRef, _c: NodeRef| {
            let first = g.slice_cols(x, 0, 1)?;
            let s = g.scale(first, k)?;
            Ok(g.offset(s, base)?)
        }
    }

    #[test]
    fn gan_losses_at_half() {
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 4, 2);
        let half = affine(0.0, 0.5);
        let (ld, lg) = gan_losses(&mut g, &half, x, f, c).unwrap();
        let xv = Array::ones((4, 2));
        let cv = Array::zeros((4, 1));
        let v = eval(&g, [x, f, c], [&xv, &xv, &cv], &[ld, lg]);
        assert!((v[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v[1] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_vanishes_for_optimal_discriminator() {
        // D(x) = x₁ with real rows at 1 and fake rows at 0; clamping keeps logs finite.
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 3, 1);
        let ident = affine(1.0, 0.0);
        let (ld, _) = gan_losses(&mut g, &ident, x, f, c).unwrap();
        let (xv, fv, cv) = (Array::ones((3, 1)), Array::zeros((3, 1)), Array::zeros((3, 1)));
        let v = eval(&g, [x, f, c], [&xv, &fv, &cv], &[ld]);
        assert!(v[0] >= 0.0 && v[0] < 1e-7);
    }

    #[test]
    fn penalty_of_unit_norm_linear_critic_is_zero() {
        let w = array![[0.6], [0.8]];
        let critic = move |g: &mut Graph, x: NodeRef, _c: NodeRef| -> Result<NodeRef> {
            let wn = g.constant(w.clone());
            Ok(g.matmul(x, wn)?)
        };
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 5, 2);
        let p = gradient_penalty(&mut g, &critic, x, f, c, &mut rng()).unwrap();
        let xv = Array::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let fv = Array::from_shape_fn((5, 2), |(i, j)| (i + j * 3) as f64 * 0.1);
        let cv = Array::zeros((5, 1));
        let v = eval(&g, [x, f, c], [&xv, &fv, &cv], &[p.value]);
        assert!(v[0].abs() < 1e-12);
    }

    #[test]
    fn penalty_of_slope_two_critic_is_one() {
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 4, 3);
        let p = gradient_penalty(&mut g, &affine(2.0, 0.0), x, f, c, &mut rng()).unwrap();
        let xv = Array::ones((4, 3));
        let fv = Array::zeros((4, 3));
        let cv = Array::zeros((4, 1));
        let v = eval(&g, [x, f, c], [&xv, &fv, &cv], &[p.value]);
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_lie_on_segments() {
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 6, 3);
        let p = gradient_penalty(&mut g, &affine(1.0, 0.0), x, f, c, &mut rng()).unwrap();
        let xv = Array::from_shape_fn((6, 3), |(i, j)| (i as f64) - (j as f64) * 1.5);
        let fv = Array::from_shape_fn((6, 3), |(i, j)| (j as f64) * 2.0 - i as f64);
        let cv = Array::zeros((6, 1));
        let mut b = Bindings::new();
        b.bind(x, &xv).bind(f, &fv).bind(c, &cv);
        let v = g.forward(&b).unwrap();
        let hat = v.get(p.interpolates);
        for ((h, a), b) in hat.iter().zip(&xv).zip(&fv) {
            assert!(*h >= a.min(*b) - 1e-12 && *h <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn wgan_losses_closed_forms() {
        let xv = Array::ones((4, 2));
        let fv = Array::zeros((4, 2));
        let cv = Array::zeros((4, 1));
        // constant critic: zero Wasserstein part, penalty (0-1)² = 1
        for lambda in [10.0, 3.5] {
            let mut g = Graph::new();
            let (x, f, c) = inputs(&mut g, 4, 2);
            let l = wgan_losses(&mut g, &affine(0.0, 7.0), x, f, c, lambda, &mut rng()).unwrap();
            let v = eval(&g, [x, f, c], [&xv, &fv, &cv], &[l.loss_d]);
            assert!((v[0] - lambda).abs() < 1e-12);
        }
        // D(real)=1, D(fake)=0 with unit gradient norm
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 4, 2);
        let l = wgan_losses(&mut g, &affine(1.0, 0.0), x, f, c, 10.0, &mut rng()).unwrap();
        let v = eval(&g, [x, f, c], [&xv, &fv, &cv], &[l.loss_d, l.loss_g]);
        assert!((v[0] + 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        // λ = 0 leaves the plain estimate
        let mut g = Graph::new();
        let (x, f, c) = inputs(&mut g, 4, 2);
        let l = wgan_losses(&mut g, &affine(3.0, 0.0), x, f, c, 0.0, &mut rng()).unwrap();
        let v = eval(&g, [x, f, c], [&xv, &fv, &cv], &[l.loss_d]);
        assert!((v[0] + 3.0).abs() < 1e-12);
    }

    fn cls_eval(model: &SoftmaxModel, xv: &Array, labels: &[ClassId]) -> f64 {
        let mut g = Graph::new();
        let x = g.input(Shape::new(xv.nrows(), xv.ncols()));
        let l = cls_loss(&mut g, model, x, labels).unwrap();
        let mut b = Bindings::new();
        b.bind(x, xv);
        g.forward(&b).unwrap().scalar(l)
    }

    #[test]
    fn cls_loss_closed_forms() {
        let xv = array![[1.0, 2.0], [0.5, -1.0]];
        let zero = SoftmaxModel::zeros(2, vec![3, 5, 8]);
        assert!((cls_eval(&zero, &xv, &[3, 8]) - 3f64.ln()).abs() < 1e-12);

        let mut m = zero.clone();
        m.weight = array![[0.2, -0.1, 0.4], [0.3, 0.7, -0.5]];
        let mut shifted = m.clone();
        shifted.bias += 4.25;
        let (a, b) = (cls_eval(&m, &xv, &[5, 3]), cls_eval(&shifted, &xv, &[5, 3]));
        assert!((a - b).abs() < 1e-12);

        let mut sharp = zero.clone();
        sharp.bias = array![[0.0, 800.0, 0.0]];
        assert!(cls_eval(&sharp, &xv, &[5, 5]) < 1e-300);

        let mut g = Graph::new();
        let x = g.input(Shape::new(2, 2));
        assert!(matches!(
            cls_loss(&mut g, &zero, x, &[3, 4]),
            Err(GanError::Classify(ClassifyError::UnknownLabel(4)))
        ));
    }

    #[test]
    fn cls_loss_gradient_reaches_features_only() {
        let mut model = SoftmaxModel::zeros(2, vec![0, 1]);
        model.weight = array![[1.0, -1.0], [0.5, 0.25]];
        let before = model.clone();
        let mut g = Graph::new();
        let x = g.input(Shape::new(1, 2));
        let l = cls_loss(&mut g, &model, x, &[1]).unwrap();
        let dx = g.gradients(l, &[x]).unwrap()[0];
        let xv = array![[0.3, 0.9]];
        let mut b = Bindings::new();
        b.bind(x, &xv);
        let grad = g.forward(&b).unwrap().to_owned(dx);
        assert!(grad.iter().any(|v| v.abs() > 1e-3));
        assert_eq!(model, before);
    }

    fn mmd_eval(xv: &Array, yv: &Array, bws: &[f64], est: MmdEstimator) -> f64 {
        let mut g = Graph::new();
        let x = g.input(Shape::new(xv.nrows(), xv.ncols()));
        let y = g.input(Shape::new(yv.nrows(), yv.ncols()));
        let m = mmd_loss(&mut g, x, y, bws, est).unwrap();
        let mut b = Bindings::new();
        b.bind(x, xv).bind(y, yv);
        g.forward(&b).unwrap().scalar(m)
    }

    #[test]
    fn mmd_examples() {
        let bws = [1.0, 5.0];
        let x = array![[0.1, 0.2], [1.0, -0.3], [0.4, 0.4]];
        assert!(mmd_eval(&x, &x, &bws, MmdEstimator::Biased).abs() < 1e-12);
        // far-separated point masses: 2·k(0) with k(0) = number of bandwidths
        let a = Array::zeros((3, 2));
        let b = Array::from_elem((4, 2), 1e4);
        for est in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
            assert!((mmd_eval(&a, &b, &bws, est) - 4.0).abs() < 1e-9);
        }
        let y = array![[0.0, 1.0], [2.0, 0.5]];
        for est in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
            let (p, q) = (mmd_eval(&x, &y, &bws, est), mmd_eval(&y, &x, &bws, est));
            assert!((p - q).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let n = g.input(Shape::new(2, 2));
        assert!(mmd_loss(&mut g, n, n, &[], MmdEstimator::Biased).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("wgan".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Variant::FWgan);
        assert!(c.validate().is_ok());
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(Variant::FWgan);
        c.critic_steps = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(Variant::FGmmn);
        c.mmd_bandwidths.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn synth_file_round_trip() {
        let s = SynthSet {
            features: array![[0.5f32, 1.0], [2.0, 0.0]],
            labels: vec![3, 3],
            n_syn: 2,
        };
        let bytes = s.to_bytes();
        assert_eq!(SynthSet::from_bytes(&bytes).unwrap(), s);
        assert!(matches!(
            SynthSet::from_bytes(&bytes[..bytes.len() - 1]),
            Err(DataError::Truncated(_))
        ));
    }
}
