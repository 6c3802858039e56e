//! The `featgen` command line.
//!
//! Every subcommand reads and writes files only, so pipelines compose across
//! processes. Settings come from an optional `key = value` config file,
//! then `--set key=value` overrides, then explicit flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classify::{ClassifierConfig, ClassifyError, CompatModel, CompatPredictor, SoftmaxModel};
use crate::data::{self, ClassId, DataError, FeatureDataset, SynthSpec};
use crate::eval::{self, EvalError, EvalReport};
use crate::gan_train::{self, GanError, TrainConfig, Variant};
use crate::gradcheck;
use crate::nets::{self, MlpParams, NetError};
use crate::pipeline::{self, ClassifierKind, FittedClassifier, PipelineError, Setting};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_TRAIN: i32 = 5;
pub const EXIT_CLASSIFY: i32 = 6;
pub const EXIT_EVAL: i32 = 7;
pub const EXIT_GRADCHECK: i32 = 8;
pub const EXIT_NET: i32 = 9;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("[{}] {}", .0.code(), .0)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("[{}] {}", .0.code(), .0)]
    Eval(#[from] EvalError),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Classify(e) => e.into(),
            PipelineError::Eval(e) => e.into(),
            PipelineError::Gan(e) => e.into(),
        }
    }
}

impl CliError {
    /// Process exit status for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Io { .. }
            | CliError::Data(DataError::Io(_))
            | CliError::Net(NetError::Io(_))
            | CliError::Classify(ClassifyError::Io(_)) => EXIT_IO,
            CliError::Data(_) => EXIT_DATA,
            CliError::Net(_) => EXIT_NET,
            CliError::Gan(GanError::Data(_)) => EXIT_DATA,
            CliError::Gan(GanError::Classify(_)) | CliError::Classify(_) => EXIT_CLASSIFY,
            CliError::Gan(_) => EXIT_TRAIN,
            CliError::Eval(EvalError::Classify(_)) => EXIT_CLASSIFY,
            CliError::Eval(_) => EXIT_EVAL,
            CliError::Gradcheck(_) => EXIT_GRADCHECK,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const TRAIN_KEYS: &[&str] = &[
    "variant",
    "lambda_gp",
    "beta_cls",
    "epochs",
    "batch_size",
    "critic_steps",
    "critic_warmup",
    "learn_rate",
    "adam_beta1",
    "adam_beta2",
    "seed",
    "hidden_g",
    "hidden_d",
    "noise_dim",
    "leaky_slope",
    "mmd_bandwidths",
    "n_syn",
];
const CLS_KEYS: &[&str] = &[
    "cls_epochs",
    "cls_learn_rate",
    "cls_batch_size",
    "cls_beta1",
    "cls_beta2",
    "cls_margin",
];
const SYNTH_KEYS: &[&str] = &[
    "n_seen",
    "n_unseen",
    "d_x",
    "d_c",
    "samples_per_class",
    "test_seen_per_class",
    "noise_sigma",
];
const PATH_KEYS: &[&str] = &[
    "data",
    "out",
    "generator",
    "classifier",
    "synth",
    "model",
    "zsl_model",
    "report",
    "log",
    "disc_out",
    "kind",
    "mode",
    "classes",
];

fn known_key(key: &str) -> bool {
    [TRAIN_KEYS, CLS_KEYS, SYNTH_KEYS, PATH_KEYS]
        .iter()
        .any(|keys| keys.contains(&key))
}

/// Flat `key = value` settings; each value remembers the line it came from
/// (0 for command-line overrides).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// skipped; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| CliError::Config {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            let key = key.trim();
            if !known_key(key) {
                return Err(CliError::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                });
            }
            if let Some((_, first)) = cfg.entries.get(key) {
                return Err(CliError::Config {
                    line,
                    msg: format!("key `{key}` already set on line {first}"),
                });
            }
            cfg.entries
                .insert(key.to_string(), (value.trim().to_string(), line));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets `key` from the command line, replacing any file value.
    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !known_key(key) {
            return Err(CliError::Usage(format!("unknown key `{key}`")));
        }
        self.entries
            .insert(key.to_string(), (value.to_string(), 0));
        Ok(())
    }

    fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    fn invalid(&self, key: &str, msg: impl Display) -> CliError {
        match self.entries.get(key) {
            Some((_, line)) if *line > 0 => CliError::Config {
                line: *line,
                msg: format!("key `{key}`: {msg}"),
            },
            _ => CliError::Usage(format!("`{key}`: {msg}")),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, _)) => v
                .parse()
                .map(Some)
                .map_err(|e| self.invalid(key, format!("invalid value `{v}`: {e}"))),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing required setting `{key}` (pass --{} or set it in the config)",
                key.replace('_', "-")
            ))
        })
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.require::<String>(key).map(PathBuf::from)
    }

    fn opt_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.get::<String>(key)?.map(PathBuf::from))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("seed", 0)
    }

    pub fn classifier_config(&self) -> Result<ClassifierConfig> {
        let d = ClassifierConfig::default();
        Ok(ClassifierConfig {
            epochs: self.get_or("cls_epochs", d.epochs)?,
            learn_rate: self.get_or("cls_learn_rate", d.learn_rate)?,
            batch_size: self.get_or("cls_batch_size", d.batch_size)?,
            beta1: self.get_or("cls_beta1", d.beta1)?,
            beta2: self.get_or("cls_beta2", d.beta2)?,
            margin: self.get_or("cls_margin", d.margin)?,
            seed: self.seed()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant: Variant = self.get_or("variant", Variant::FClsWgan)?;
        let d = TrainConfig::new(variant);
        let bandwidths = match self.get::<String>("mmd_bandwidths")? {
            None => d.mmd_bandwidths.clone(),
            Some(list) => list
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| self.invalid("mmd_bandwidths", e))?,
        };
        let cfg = TrainConfig {
            variant,
            lambda_gp: self.get_or("lambda_gp", d.lambda_gp)?,
            beta_cls: self.get_or("beta_cls", d.beta_cls)?,
            epochs: self.get_or("epochs", d.epochs)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            critic_steps: self.get_or("critic_steps", d.critic_steps)?,
            critic_warmup: self.get_or("critic_warmup", d.critic_warmup)?,
            learn_rate: self.get_or("learn_rate", d.learn_rate)?,
            adam_beta1: self.get_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: self.get_or("adam_beta2", d.adam_beta2)?,
            seed: self.seed()?,
            hidden_g: self.get_or("hidden_g", d.hidden_g)?,
            hidden_d: self.get("hidden_d")?,
            noise_dim: self.get("noise_dim")?,
            leaky_slope: self.get_or("leaky_slope", d.leaky_slope)?,
            mmd_bandwidths: bandwidths,
            cls: self.classifier_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let d = SynthSpec::fixture(0);
        let samples = self.get_or("samples_per_class", d.samples_per_class)?;
        let mut spec = SynthSpec::new(
            self.get_or("n_seen", d.n_seen)?,
            self.get_or("n_unseen", d.n_unseen)?,
            self.get_or("d_x", d.d_x)?,
            self.get_or("d_c", d.d_c)?,
            samples,
        );
        spec.test_seen_per_class = self.get_or("test_seen_per_class", spec.test_seen_per_class)?;
        spec.noise_sigma = self.get_or("noise_sigma", spec.noise_sigma)?;
        spec.seed = self.seed()?;
        Ok(spec)
    }

    pub fn n_syn(&self) -> Result<usize> {
        let n = self.get_or("n_syn", gan_train::DEFAULT_N_SYN)?;
        if n == 0 {
            return Err(self.invalid("n_syn", "must be >= 1"));
        }
        Ok(n)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "featgen",
    version,
    about = "Feature-generating networks for zero-shot learning"
)]
struct Cli {
    /// Worker threads for batch prediction (falls back to FEATGEN_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic attribute-conditioned dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<String>,
    },
    /// Train the frozen softmax classifier on real seen-class features.
    PretrainCls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Train a feature generator; writes its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Pretrained classifier for f-clswgan (trained on the fly if absent).
        #[arg(long)]
        classifier: Option<String>,
        /// Training log, one `epoch,step,loss_d,loss_g,loss_cls,gp` line per step.
        #[arg(long)]
        log: Option<String>,
        /// Also write the discriminator checkpoint.
        #[arg(long)]
        disc_out: Option<String>,
    },
    /// Synthesise features for unseen (or seen, or all) classes.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// unseen | seen | all
        #[arg(long)]
        classes: Option<String>,
    },
    /// Train the final classifier on real and synthetic features.
    FitClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        synth: Option<String>,
        /// softmax | compat
        #[arg(long)]
        kind: Option<String>,
        /// zsl | gzsl
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Score a classifier: ZSL T1 and GZSL u, s, H.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        /// Classifier used for GZSL (and ZSL unless --zsl-model is given).
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        zsl_model: Option<String>,
        /// softmax | compat
        #[arg(long)]
        kind: Option<String>,
        /// JSON report path.
        #[arg(long)]
        report: Option<String>,
    },
    /// Repeat generate, fit and eval for n_syn in 1, 10, 50, 100, 300.
    SweepNsyn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        kind: Option<String>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<String>,
    },
    /// Finite-difference checks of every autodiff op and the penalty gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 20)]
        second_order_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn settings(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_data(cfg: &RunConfig) -> Result<FeatureDataset> {
    Ok(data::load_dataset(cfg.path("data")?)?)
}

fn load_generator(cfg: &RunConfig) -> Result<MlpParams> {
    let slope = cfg.get_or("leaky_slope", nets::DEFAULT_LEAKY_SLOPE)?;
    let layers = nets::load_layers(cfg.path("generator")?)?;
    Ok(MlpParams::generator(layers, slope)?)
}

fn kind(cfg: &RunConfig) -> Result<ClassifierKind> {
    cfg.get_or("kind", ClassifierKind::Softmax)
}

fn load_predictor(path: &Path, kind: ClassifierKind, ds: &FeatureDataset) -> Result<FittedClassifier> {
    Ok(match kind {
        ClassifierKind::Softmax => FittedClassifier::Softmax(SoftmaxModel::load(path)?),
        ClassifierKind::Compat => FittedClassifier::Compat(CompatPredictor {
            model: CompatModel::load(path)?,
            embeddings: ds.class_embeddings().mapv(f64::from),
        }),
    })
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::SynthData { common, out } => {
            let cfg = settings(&common, &[("out", &out)])?;
            let ds = data::make_synthetic(&cfg.synth_spec()?)?;
            write_file(&cfg.path("out")?, &ds.to_bytes())
        }
        Command::PretrainCls { common, data, out } => {
            let cfg = settings(&common, &[("data", &data), ("out", &out)])?;
            let ds = load_data(&cfg)?;
            let model = gan_train::pretrain_cls(&ds, &cfg.classifier_config()?)?;
            Ok(model.save(cfg.path("out")?)?)
        }
        Command::Train {
            common,
            data,
            out,
            classifier,
            log,
            disc_out,
        } => {
            let cfg = settings(
                &common,
                &[
                    ("data", &data),
                    ("out", &out),
                    ("classifier", &classifier),
                    ("log", &log),
                    ("disc_out", &disc_out),
                ],
            )?;
            let train_cfg = cfg.train_config()?;
            let ds = load_data(&cfg)?;
            let out = cfg.path("out")?;
            let pretrained = match cfg.opt_path("classifier")? {
                Some(p) => Some(SoftmaxModel::load(p)?),
                None => None,
            };
            let outcome = gan_train::train(&train_cfg, &ds, pretrained.as_ref())?;
            outcome.generator.save(&out)?;
            if let (Some(p), Some(d)) = (cfg.opt_path("disc_out")?, &outcome.discriminator) {
                d.save(p)?;
            }
            if let Some(p) = cfg.opt_path("log")? {
                let text: String = outcome
                    .log
                    .iter()
                    .map(|r| r.to_line() + "\n")
                    .collect();
                write_file(&p, text.as_bytes())?;
            }
            Ok(())
        }
        Command::Generate {
            common,
            data,
            generator,
            out,
            classes,
        } => {
            let cfg = settings(
                &common,
                &[
                    ("data", &data),
                    ("generator", &generator),
                    ("out", &out),
                    ("classes", &classes),
                ],
            )?;
            let ds = load_data(&cfg)?;
            let gen = load_generator(&cfg)?;
            let targets: Vec<ClassId> = match cfg.get_or("classes", "unseen".to_string())?.as_str() {
                "unseen" => ds.unseen_ids().to_vec(),
                "seen" => ds.seen_ids().to_vec(),
                "all" => ds.all_ids(),
                other => {
                    return Err(cfg.invalid("classes", format!("`{other}` is not unseen, seen or all")))
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
            let synth = gan_train::synthesize_features(
                &gen,
                ds.class_embeddings(),
                &targets,
                cfg.n_syn()?,
                &mut rng,
            )?;
            write_file(&cfg.path("out")?, &synth.to_bytes())
        }
        Command::FitClassifier {
            common,
            data,
            synth,
            kind: k,
            mode,
            out,
        } => {
            let cfg = settings(
                &common,
                &[
                    ("data", &data),
                    ("synth", &synth),
                    ("kind", &k),
                    ("mode", &mode),
                    ("out", &out),
                ],
            )?;
            let ds = load_data(&cfg)?;
            let synth = match cfg.opt_path("synth")? {
                Some(p) => Some(gan_train::SynthSet::from_bytes(&read_file(&p)?)?),
                None => None,
            };
            let setting: Setting = cfg.get_or("mode", Setting::Gzsl)?;
            let model = pipeline::fit_classifier(
                &ds,
                synth.as_ref(),
                setting,
                kind(&cfg)?,
                &cfg.classifier_config()?,
            )?;
            Ok(model.save(cfg.path("out")?)?)
        }
        Command::Eval {
            common,
            data,
            model,
            zsl_model,
            kind: k,
            report,
        } => {
            let cfg = settings(
                &common,
                &[
                    ("data", &data),
                    ("model", &model),
                    ("zsl_model", &zsl_model),
                    ("kind", &k),
                    ("report", &report),
                ],
            )?;
            let ds = load_data(&cfg)?;
            let kind = kind(&cfg)?;
            let gzsl_model = load_predictor(&cfg.path("model")?, kind, &ds)?;
            let zsl = match cfg.opt_path("zsl_model")? {
                Some(p) => eval::evaluate_zsl(&load_predictor(&p, kind, &ds)?, &ds),
                None => eval::evaluate_zsl(&gzsl_model, &ds),
            };
            // a model without unseen columns gets nothing right
            let t1 = match zsl {
                Err(EvalError::Classify(ClassifyError::NoCandidate)) => 0.0,
                other => other?,
            };
            let report = EvalReport::new(eval::evaluate_gzsl(&gzsl_model, &ds)?, t1);
            if let Some(p) = cfg.opt_path("report")? {
                write_file(&p, (report.to_json() + "\n").as_bytes())?;
            }
            writeln!(stdout, "{}", report.summary()).map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })
        }
        Command::SweepNsyn {
            common,
            data,
            generator,
            kind: k,
            out,
        } => {
            let cfg = settings(
                &common,
                &[
                    ("data", &data),
                    ("generator", &generator),
                    ("kind", &k),
                    ("out", &out),
                ],
            )?;
            let ds = load_data(&cfg)?;
            let gen = load_generator(&cfg)?;
            let rows = pipeline::sweep_nsyn(
                &ds,
                &gen,
                &pipeline::SWEEP_N_SYN,
                kind(&cfg)?,
                &cfg.classifier_config()?,
                cfg.seed()?,
            )?;
            let csv = pipeline::sweep_csv(&rows);
            match cfg.opt_path("out")? {
                Some(p) => write_file(&p, csv.as_bytes()),
                None => stdout.write_all(csv.as_bytes()).map_err(|source| CliError::Io {
                    path: "<stdout>".into(),
                    source,
                }),
            }
        }
        Command::Gradcheck {
            points,
            second_order_points,
            seed,
        } => {
            let io_err = |source| CliError::Io {
                path: "<stdout>".into(),
                source,
            };
            let mut failed = Vec::new();
            for check in gradcheck::op_suite(points, seed).map_err(GanError::from)? {
                let ok = check.max_error < 1e-5;
                writeln!(
                    stdout,
                    "{:<22} {:>4} points  max rel err {:.3e}  {}",
                    check.name,
                    check.points,
                    check.max_error,
                    if ok { "ok" } else { "FAIL" }
                )
                .map_err(io_err)?;
                if !ok {
                    failed.push(check.name.to_string());
                }
            }
            let second = gradcheck::penalty_second_order(second_order_points, seed)?;
            let ok = second < 1e-3;
            writeln!(
                stdout,
                "{:<22} {:>4} points  max rel err {:.3e}  {}",
                "penalty-param-grad",
                second_order_points,
                second,
                if ok { "ok" } else { "FAIL" }
            )
            .map_err(io_err)?;
            if !ok {
                failed.push("penalty-param-grad".into());
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Gradcheck(failed.join(", ")))
            }
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("FEATGEN_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("FEATGEN_THREADS must be a count, got `{v}`"))),
        _ => Ok(None),
    }
}

/// Runs one command line (including the program name) and returns the exit
/// status; output goes to `stdout`, diagnostics to stderr.
pub fn run_with_output<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = thread_count(cli.threads).and_then(|threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
        let mut buffer = Vec::new();
        let outcome = pool.install(|| execute(cli.command, &mut buffer));
        stdout
            .write_all(&buffer)
            .and_then(|()| stdout.flush())
            .map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })?;
        outcome
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("featgen: error: {e}");
            e.exit_code()
        }
    }
}

/// [`run_with_output`] writing to the process's stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_output(argv, &mut io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nepochs = 7  # trailing\nvariant=f-wgan\n").unwrap();
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), Some(7));
        assert_eq!(cfg.train_config().unwrap().variant, Variant::FWgan);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::parse("epochs = 1\n\nepoch = 2\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 3, .. }), "{err}");
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn malformed_and_duplicate_lines() {
        assert!(matches!(
            RunConfig::parse("epochs 3"),
            Err(CliError::Config { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(CliError::Config { line: 2, .. })
        ));
    }

    #[test]
    fn bad_value_names_line() {
        let cfg = RunConfig::parse("\nbatch_size = many").unwrap();
        let err = cfg.train_config().unwrap_err();
        assert!(matches!(err, CliError::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn overrides_win_over_file() {
        let mut cfg = RunConfig::parse("epochs = 3").unwrap();
        cfg.apply_override("epochs=9").unwrap();
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), Some(9));
        assert!(cfg.apply_override("epochs").is_err());
        assert!(cfg.apply_override("nope=1").is_err());
    }

    #[test]
    fn invalid_train_settings_are_rejected() {
        let cfg = RunConfig::parse("batch_size = 1").unwrap();
        assert!(matches!(cfg.train_config(), Err(CliError::Gan(GanError::Config(_)))));
        let cfg = RunConfig::parse("mmd_bandwidths = 1, x").unwrap();
        assert!(cfg.train_config().is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        let mut sink = Vec::new();
        assert_eq!(run_with_output(["featgen", "bogus"], &mut sink), EXIT_USAGE);
        assert_eq!(run_with_output(["featgen", "train"], &mut sink), EXIT_USAGE);
    }
}
