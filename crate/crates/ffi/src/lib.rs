//! C ABI over the `featgen` toolkit.
//!
//! Objects are opaque handles created by `fg_*_load` / `fg_*_new` style
//! calls and released with the matching `fg_*_free`. Every fallible call
//! returns an [`FgStatus`] code; on failure `fg_last_error` describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use featgen::classify::ClassifierConfig;
use featgen::data::{self, DataError, FeatureDataset, SynthSpec};
use featgen::eval;
use featgen::gan_train::{self, GanError, TrainConfig, Variant};
use featgen::nets::{self, MlpParams, NetError};
use featgen::pipeline::{self, ClassifierKind, PipelineError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes shared by every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Train = 5,
    Classify = 6,
    Eval = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgVariant {
    Gan = 0,
    Wgan = 1,
    ClsWgan = 2,
    Gmmn = 3,
}

impl From<FgVariant> for Variant {
    fn from(v: FgVariant) -> Self {
        match v {
            FgVariant::Gan => Variant::FGan,
            FgVariant::Wgan => Variant::FWgan,
            FgVariant::ClsWgan => Variant::FClsWgan,
            FgVariant::Gmmn => Variant::FGmmn,
        }
    }
}

/// Generator training settings. Zero `hidden_d` or `noise_dim` selects the
/// defaults (variant-dependent width, embedding width).
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FgTrainConfig {
    pub variant: FgVariant,
    pub epochs: u32,
    pub batch_size: u32,
    pub critic_steps: u32,
    pub critic_warmup: u32,
    pub hidden_g: u32,
    pub hidden_d: u32,
    pub noise_dim: u32,
    pub learn_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_gp: f64,
    pub beta_cls: f64,
    pub leaky_slope: f64,
    pub seed: u64,
    pub cls_epochs: u32,
    pub cls_batch_size: u32,
    pub cls_learn_rate: f64,
}

/// Scores of one synthetic feature set, in percent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FgScores {
    pub zsl_t1: f64,
    pub gzsl_u: f64,
    pub gzsl_s: f64,
    pub gzsl_h: f64,
}

/// Opaque dataset handle.
pub struct FgDataset(FeatureDataset);

/// Opaque generator handle.
pub struct FgGenerator(MlpParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl ToString) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Failure(FgStatus, String);

type FfiResult<T> = Result<T, Failure>;

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io(_) => FgStatus::Io,
            DataError::InvalidSpec(_) => FgStatus::InvalidArgument,
            _ => FgStatus::Format,
        };
        Failure(status, format!("[{}] {e}", e.code()))
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let status = match e {
            NetError::Io(_) => FgStatus::Io,
            _ => FgStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<GanError> for Failure {
    fn from(e: GanError) -> Self {
        match e {
            GanError::Data(d) => d.into(),
            GanError::Net(n) => n.into(),
            GanError::Config(_) | GanError::UnknownClass(_) => {
                Failure(FgStatus::InvalidArgument, e.to_string())
            }
            GanError::Classify(_) => Failure(FgStatus::Classify, e.to_string()),
            _ => Failure(FgStatus::Train, e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gan(g) => g.into(),
            PipelineError::Classify(c) => Failure(FgStatus::Classify, c.to_string()),
            PipelineError::Eval(v) => Failure(FgStatus::Eval, format!("[{}] {v}", v.code())),
        }
    }
}

impl From<eval::EvalError> for Failure {
    fn from(e: eval::EvalError) -> Self {
        Failure(FgStatus::Eval, format!("[{}] {e}", e.code()))
    }
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> FfiResult<()>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            FgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FgStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(FgStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `fg_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_load(path: *const c_char, out: *mut *mut FgDataset) -> FgStatus {
    guard(|| {
        let ds = data::load_dataset(unsafe { path_arg(path)? })?;
        unsafe { store(out, FgDataset(ds)) }
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_save(ds: *const FgDataset, path: *const c_char) -> FgStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "dataset")? };
        Ok(data::save_dataset(&ds.0, unsafe { path_arg(path)? })?)
    })
}

/// Synthetic attribute-conditioned dataset (see the `synth-data` command).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_synthetic(
    n_seen: u32,
    n_unseen: u32,
    d_x: u32,
    d_c: u32,
    samples_per_class: u32,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut FgDataset,
) -> FgStatus {
    guard(|| {
        let mut spec = SynthSpec::new(
            n_seen as usize,
            n_unseen as usize,
            d_x as usize,
            d_c as usize,
            samples_per_class as usize,
        );
        spec.noise_sigma = noise_sigma;
        spec.seed = seed;
        let ds = data::make_synthetic(&spec)?;
        unsafe { store(out, FgDataset(ds)) }
    })
}

/// Writes feature width, embedding width, class count and seen/unseen class
/// counts. Any output pointer may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_dims(
    ds: *const FgDataset,
    d_x: *mut u32,
    d_c: *mut u32,
    n_seen: *mut u32,
    n_unseen: *mut u32,
) -> FgStatus {
    guard(|| {
        let ds = &unsafe { handle(ds, "dataset")? }.0;
        for (p, v) in [
            (d_x, ds.d_x()),
            (d_c, ds.d_c()),
            (n_seen, ds.seen_ids().len()),
            (n_unseen, ds.unseen_ids().len()),
        ] {
            if let Some(p) = unsafe { p.as_mut() } {
                *p = v as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fg_dataset_free(ds: *mut FgDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Defaults for `variant`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_train_config_default(
    variant: FgVariant,
    out: *mut FgTrainConfig,
) -> FgStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("output pointer"))?;
        let d = TrainConfig::new(variant.into());
        *out = FgTrainConfig {
            variant,
            epochs: d.epochs as u32,
            batch_size: d.batch_size as u32,
            critic_steps: d.critic_steps as u32,
            critic_warmup: d.critic_warmup as u32,
            hidden_g: d.hidden_g as u32,
            hidden_d: 0,
            noise_dim: 0,
            learn_rate: d.learn_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            lambda_gp: d.lambda_gp,
            beta_cls: d.beta_cls,
            leaky_slope: d.leaky_slope,
            seed: d.seed,
            cls_epochs: d.cls.epochs as u32,
            cls_batch_size: d.cls.batch_size as u32,
            cls_learn_rate: d.cls.learn_rate,
        };
        Ok(())
    })
}

fn classifier_config(c: &FgTrainConfig) -> ClassifierConfig {
    ClassifierConfig {
        epochs: c.cls_epochs as usize,
        batch_size: c.cls_batch_size as usize,
        learn_rate: c.cls_learn_rate,
        seed: c.seed,
        ..ClassifierConfig::default()
    }
}

fn train_config(c: &FgTrainConfig) -> TrainConfig {
    let nonzero = |v: u32| (v > 0).then_some(v as usize);
    TrainConfig {
        epochs: c.epochs as usize,
        batch_size: c.batch_size as usize,
        critic_steps: c.critic_steps as usize,
        critic_warmup: c.critic_warmup as usize,
        hidden_g: c.hidden_g as usize,
        hidden_d: nonzero(c.hidden_d),
        noise_dim: nonzero(c.noise_dim),
        learn_rate: c.learn_rate,
        adam_beta1: c.adam_beta1,
        adam_beta2: c.adam_beta2,
        lambda_gp: c.lambda_gp,
        beta_cls: c.beta_cls,
        leaky_slope: c.leaky_slope,
        seed: c.seed,
        cls: classifier_config(c),
        ..TrainConfig::new(c.variant.into())
    }
}

/// Trains a generator on the dataset's seen-class training rows.
///
/// # Safety
/// `ds` and `config` must be valid pointers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_train(
    ds: *const FgDataset,
    config: *const FgTrainConfig,
    out: *mut *mut FgGenerator,
) -> FgStatus {
    guard(|| {
        let ds = &unsafe { handle(ds, "dataset")? }.0;
        let config = unsafe { handle(config, "config")? };
        let outcome = gan_train::train(&train_config(config), ds, None)?;
        unsafe { store(out, FgGenerator(outcome.generator)) }
    })
}

/// Loads a generator checkpoint (`FGNW`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_generator_load(
    path: *const c_char,
    leaky_slope: f64,
    out: *mut *mut FgGenerator,
) -> FgStatus {
    guard(|| {
        let layers = nets::load_layers(unsafe { path_arg(path)? })?;
        let gen = MlpParams::generator(layers, leaky_slope)?;
        unsafe { store(out, FgGenerator(gen)) }
    })
}

/// # Safety
/// `gen` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fg_generator_save(gen: *const FgGenerator, path: *const c_char) -> FgStatus {
    guard(|| {
        let gen = unsafe { handle(gen, "generator")? };
        Ok(gen.0.save(unsafe { path_arg(path)? })?)
    })
}

/// # Safety
/// `gen` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fg_generator_free(gen: *mut FgGenerator) {
    if !gen.is_null() {
        drop(unsafe { Box::from_raw(gen) });
    }
}

/// Generates `n_syn` features for every unseen class, in ascending class
/// order. `features` must hold `n_syn · n_unseen · d_x` floats and `labels`
/// `n_syn · n_unseen` ids; the lengths are checked.
///
/// # Safety
/// Handles must be live; `features` and `labels` must point to buffers of
/// the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fg_synthesize_unseen(
    gen: *const FgGenerator,
    ds: *const FgDataset,
    n_syn: u32,
    seed: u64,
    features: *mut f32,
    features_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> FgStatus {
    guard(|| {
        let gen = &unsafe { handle(gen, "generator")? }.0;
        let ds = &unsafe { handle(ds, "dataset")? }.0;
        if features.is_null() || labels.is_null() {
            return Err(null("output buffer"));
        }
        let rows = n_syn as usize * ds.unseen_ids().len();
        let width = gen.output_dim();
        if features_len != rows * width || labels_len != rows {
            return Err(Failure(
                FgStatus::InvalidArgument,
                format!(
                    "buffers must hold {} features and {rows} labels",
                    rows * width
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let synth = gan_train::synthesize_features(
            gen,
            ds.class_embeddings(),
            ds.unseen_ids(),
            n_syn as usize,
            &mut rng,
        )?;
        let f = unsafe { std::slice::from_raw_parts_mut(features, features_len) };
        for (dst, src) in f.iter_mut().zip(synth.features.iter()) {
            *dst = *src;
        }
        unsafe { std::slice::from_raw_parts_mut(labels, labels_len) }.copy_from_slice(&synth.labels);
        Ok(())
    })
}

/// Synthesises `n_syn` unseen-class features, trains softmax classifiers
/// (ZSL on synthetic rows, GZSL on real seen plus synthetic rows) and scores
/// them on the dataset's test partitions.
///
/// # Safety
/// Handles must be live; `config` may be null for classifier defaults;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_evaluate_synthesis(
    gen: *const FgGenerator,
    ds: *const FgDataset,
    n_syn: u32,
    seed: u64,
    config: *const FgTrainConfig,
    out: *mut FgScores,
) -> FgStatus {
    guard(|| {
        let gen = &unsafe { handle(gen, "generator")? }.0;
        let ds = &unsafe { handle(ds, "dataset")? }.0;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("output pointer"))?;
        let cls = match unsafe { config.as_ref() } {
            Some(c) => classifier_config(c),
            None => ClassifierConfig {
                seed,
                ..ClassifierConfig::default()
            },
        };
        let rows = pipeline::sweep_nsyn(
            ds,
            gen,
            &[n_syn as usize],
            ClassifierKind::Softmax,
            &cls,
            seed,
        )?;
        let s = &rows[0].scores;
        *out = FgScores {
            zsl_t1: s.zsl_t1,
            gzsl_u: s.gzsl.u,
            gzsl_s: s.gzsl.s,
            gzsl_h: s.gzsl.h,
        };
        Ok(())
    })
}

/// `2us/(u+s)`, 0 when both are 0.
#[no_mangle]
pub extern "C" fn fg_harmonic_mean(u: f64, s: f64) -> f64 {
    eval::harmonic_mean(u, s)
}

/// Per-class averaged top-1 accuracy (percent) over the classes present in
/// `truths`.
///
/// # Safety
/// `predictions` and `truths` must each point to `n` ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_per_class_top1(
    predictions: *const u32,
    truths: *const u32,
    n: usize,
    out: *mut f64,
) -> FgStatus {
    guard(|| {
        if predictions.is_null() || truths.is_null() {
            return Err(null("input array"));
        }
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("output pointer"))?;
        let pred = unsafe { std::slice::from_raw_parts(predictions, n) };
        let truth = unsafe { std::slice::from_raw_parts(truths, n) };
        let classes = truth.iter().copied().collect();
        *out = eval::per_class_top1(pred, truth, &classes)?;
        Ok(())
    })
}
