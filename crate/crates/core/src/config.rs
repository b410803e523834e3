//! Run configuration (`key=value` files plus per-key overrides) and run
//! directories.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cskd::{DecayStrategy, DistillConfig, DistillMode};
use crate::error::{Error, Result};
use crate::kv::{self, Entry, Origin};
use crate::nets::{TeacherConfig, VitConfig};
use crate::train::{DistillRun, Method, TrainConfig};

/// Environment variable that supplies the default `data_root`.
pub const DATA_ROOT_ENV: &str = "CSKD_DATA";

/// Every knob of a run. Printing and re-parsing yields an equal value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    /// Use only the first N training / validation samples (0 = all).
    pub train_limit: usize,
    pub val_limit: usize,
    pub out_dir: PathBuf,
    /// Empty when unset.
    pub teacher_ckpt: PathBuf,

    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,

    pub teacher_channels: Vec<usize>,
    pub teacher_downsample: usize,

    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,

    pub method: Method,
    pub distill_mode: DistillMode,
    pub deit_distill_mode: DistillMode,
    pub temperature: f64,
    pub cskd_weight: f64,
    pub ce_weight: f64,
    pub deit_distill_weight: f64,
    pub decay: DecayStrategy,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub record_time: bool,
    /// Keep a checkpoint every N epochs (0 = only best and last).
    pub snapshot_every: usize,

    pub attention_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TeacherConfig::default();
        let s = VitConfig::default();
        let d = DistillConfig::default();
        let o = TrainConfig::default();
        Self {
            data_root: std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
            train_split: "train".into(),
            val_split: "val".into(),
            train_limit: 0,
            val_limit: 0,
            out_dir: PathBuf::from("runs/default"),
            teacher_ckpt: PathBuf::new(),
            image_size: s.image_size,
            in_channels: s.in_channels,
            num_classes: s.num_classes,
            teacher_channels: t.stage_channels,
            teacher_downsample: t.downsample,
            patch_size: s.patch_size,
            embed_dim: s.embed_dim,
            num_heads: s.num_heads,
            num_layers: s.num_layers,
            mlp_ratio: s.mlp_ratio,
            method: Method::Cskd,
            distill_mode: d.distill_mode,
            deit_distill_mode: d.deit_distill_mode,
            temperature: d.temperature,
            cskd_weight: d.cskd_weight,
            ce_weight: d.ce_weight,
            deit_distill_weight: d.deit_distill_weight,
            decay: DecayStrategy::Linear,
            epochs: o.epochs,
            batch_size: o.batch_size,
            lr: o.lr,
            lr_min: o.lr_min,
            weight_decay: o.weight_decay,
            warmup_epochs: o.warmup_epochs,
            seed: o.seed,
            record_time: o.record_time,
            snapshot_every: 0,
            attention_images: 128,
        }
    }
}

fn path_value(e: &Entry) -> Result<PathBuf> {
    if e.value.contains('#') {
        return Err(Error::Config(format!("{}: `{}` may not contain `#`", e.origin, e.key)));
    }
    Ok(PathBuf::from(&e.value))
}

fn positive(e: &Entry) -> Result<usize> {
    let v: usize = kv::value(e)?;
    if v == 0 {
        return Err(Error::Config(format!("{}: `{}` must be positive", e.origin, e.key)));
    }
    Ok(v)
}

fn nonneg_real(e: &Entry) -> Result<f64> {
    let v: f64 = kv::value(e)?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Config(format!(
            "{}: `{}` must be a finite nonnegative number, got {v}",
            e.origin, e.key
        )));
    }
    Ok(v)
}

fn parsed<V: std::str::FromStr<Err = Error>>(e: &Entry) -> Result<V> {
    e.value
        .parse()
        .map_err(|err: Error| Error::Config(format!("{}: `{}`: {err}", e.origin, e.key)))
}

impl RunConfig {
    /// Recognized keys, in print order.
    pub const KEYS: &'static [&'static str] = &[
        "data_root",
        "train_split",
        "val_split",
        "train_limit",
        "val_limit",
        "out_dir",
        "teacher_ckpt",
        "image_size",
        "in_channels",
        "num_classes",
        "teacher_channels",
        "teacher_downsample",
        "patch_size",
        "embed_dim",
        "num_heads",
        "num_layers",
        "mlp_ratio",
        "method",
        "distill_mode",
        "deit_distill_mode",
        "temperature",
        "cskd_weight",
        "ce_weight",
        "deit_distill_weight",
        "decay",
        "epochs",
        "batch_size",
        "lr",
        "lr_min",
        "weight_decay",
        "warmup_epochs",
        "seed",
        "record_time",
        "snapshot_every",
        "attention_images",
    ];

    fn set(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "data_root" => self.data_root = path_value(e)?,
            "train_split" => self.train_split = path_value(e)?.to_string_lossy().into_owned(),
            "val_split" => self.val_split = path_value(e)?.to_string_lossy().into_owned(),
            "train_limit" => self.train_limit = kv::value(e)?,
            "val_limit" => self.val_limit = kv::value(e)?,
            "out_dir" => self.out_dir = path_value(e)?,
            "teacher_ckpt" => self.teacher_ckpt = path_value(e)?,
            "image_size" => self.image_size = positive(e)?,
            "in_channels" => self.in_channels = positive(e)?,
            "num_classes" => self.num_classes = positive(e)?,
            "teacher_channels" => {
                let v = kv::list(e)?;
                if v.is_empty() || v.contains(&0) {
                    return Err(Error::Config(format!(
                        "{}: `teacher_channels` needs positive channel counts",
                        e.origin
                    )));
                }
                self.teacher_channels = v;
            }
            "teacher_downsample" => self.teacher_downsample = positive(e)?,
            "patch_size" => self.patch_size = positive(e)?,
            "embed_dim" => self.embed_dim = positive(e)?,
            "num_heads" => self.num_heads = positive(e)?,
            "num_layers" => self.num_layers = positive(e)?,
            "mlp_ratio" => self.mlp_ratio = positive(e)?,
            "method" => self.method = parsed(e)?,
            "distill_mode" => self.distill_mode = parsed(e)?,
            "deit_distill_mode" => self.deit_distill_mode = parsed(e)?,
            "temperature" => {
                let v = nonneg_real(e)?;
                if v == 0.0 {
                    return Err(Error::Config(format!("{}: `temperature` must be positive", e.origin)));
                }
                self.temperature = v;
            }
            "cskd_weight" => self.cskd_weight = nonneg_real(e)?,
            "ce_weight" => self.ce_weight = nonneg_real(e)?,
            "deit_distill_weight" => self.deit_distill_weight = nonneg_real(e)?,
            "decay" => self.decay = parsed(e)?,
            "epochs" => self.epochs = kv::value(e)?,
            "batch_size" => self.batch_size = positive(e)?,
            "lr" => self.lr = nonneg_real(e)?,
            "lr_min" => self.lr_min = nonneg_real(e)?,
            "weight_decay" => self.weight_decay = nonneg_real(e)?,
            "warmup_epochs" => self.warmup_epochs = kv::value(e)?,
            "seed" => self.seed = kv::value(e)?,
            "record_time" => self.record_time = kv::value(e)?,
            "snapshot_every" => self.snapshot_every = kv::value(e)?,
            "attention_images" => self.attention_images = positive(e)?,
            other => return Err(Error::Config(format!("{}: unknown key `{other}`", e.origin))),
        }
        Ok(())
    }

    /// Parses `text` (may be empty) over the defaults, then applies
    /// command-line overrides in order. The result is fully validated.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut origins: BTreeMap<String, Origin> = BTreeMap::new();
        let flags = overrides.iter().map(|(k, v)| Entry {
            origin: Origin::Flag,
            key: k.clone(),
            value: v.trim().to_string(),
        });
        for e in kv::parse(text)?.into_iter().chain(flags) {
            cfg.set(&e)?;
            origins.insert(e.key.clone(), e.origin.clone());
        }
        cfg.validate_with(&origins)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&BTreeMap::new())
    }

    fn validate_with(&self, origins: &BTreeMap<String, Origin>) -> Result<()> {
        let cite = |keys: &[&str]| {
            keys.iter()
                .map(|k| match origins.get(*k) {
                    Some(o) => format!("`{k}` ({o})"),
                    None => format!("`{k}` (default)"),
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        let wrap = |keys: &[&str], r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{msg} [{}]", cite(keys))),
                other => other,
            })
        };
        wrap(
            &["image_size", "teacher_channels", "teacher_downsample"],
            self.teacher_config().validate(),
        )?;
        wrap(
            &["image_size", "patch_size", "embed_dim", "num_heads"],
            self.student_config().validate(),
        )?;
        wrap(
            &["lr", "lr_min", "weight_decay", "warmup_epochs", "epochs"],
            self.train_config().validate(),
        )?;
        self.distill_config().validate()
    }

    /// Canonical text: every key, one per line, in [`Self::KEYS`] order.
    pub fn print(&self) -> String {
        let list = |v: &[usize]| kv::join(v);
        let lines = [
            ("data_root", self.data_root.display().to_string()),
            ("train_split", self.train_split.clone()),
            ("val_split", self.val_split.clone()),
            ("train_limit", self.train_limit.to_string()),
            ("val_limit", self.val_limit.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("teacher_ckpt", self.teacher_ckpt.display().to_string()),
            ("image_size", self.image_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("teacher_channels", list(&self.teacher_channels)),
            ("teacher_downsample", self.teacher_downsample.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("method", self.method.to_string()),
            ("distill_mode", self.distill_mode.to_string()),
            ("deit_distill_mode", self.deit_distill_mode.to_string()),
            ("temperature", self.temperature.to_string()),
            ("cskd_weight", self.cskd_weight.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("deit_distill_weight", self.deit_distill_weight.to_string()),
            ("decay", self.decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("record_time", self.record_time.to_string()),
            ("snapshot_every", self.snapshot_every.to_string()),
            ("attention_images", self.attention_images.to_string()),
        ];
        debug_assert_eq!(lines.len(), Self::KEYS.len());
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            in_channels: self.in_channels,
            image_size: self.image_size,
            stage_channels: self.teacher_channels.clone(),
            downsample: self.teacher_downsample,
            num_classes: self.num_classes,
        }
    }

    pub fn student_config(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            in_channels: self.in_channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            distill_mode: self.distill_mode,
            deit_distill_mode: self.deit_distill_mode,
            temperature: self.temperature,
            cskd_weight: self.cskd_weight,
            ce_weight: self.ce_weight,
            deit_distill_weight: self.deit_distill_weight,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            record_time: self.record_time,
            snapshot_every: self.snapshot_every,
        }
    }

    pub fn distill_run(&self) -> DistillRun {
        DistillRun {
            student: self.student_config(),
            distill: self.distill_config(),
            decay: self.decay,
            method: self.method,
            train: self.train_config(),
        }
    }

    pub fn teacher_ckpt(&self) -> Option<&Path> {
        (!self.teacher_ckpt.as_os_str().is_empty()).then_some(self.teacher_ckpt.as_path())
    }
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FAILURE_MARKER: &str = "FAILED";
const LOCK_FILE: &str = ".lock";

/// Output directory owned by one process for the duration of a run.
///
/// Creating it takes an exclusive lock file and writes the frozen
/// configuration; dropping it releases the lock.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    path.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(e.into()),
        }
        let dir = Self {
            path: path.to_path_buf(),
        };
        let marker = path.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(marker)?;
        }
        fs::write(path.join(CONFIG_FILE), config.print())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records why the run did not finish.
    pub fn mark_failed(&self, err: &Error) -> Result<()> {
        fs::write(self.file(FAILURE_MARKER), format!("{err}\n"))?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}
