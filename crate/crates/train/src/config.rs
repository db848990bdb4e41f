//! Run configuration and its flat `key=value` representation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use feedkit_core::losses::{FeatureLossParams, KdEnsemble, KdParams, LossKind};
use feedkit_core::{Arch, NtlStyle};

use crate::dataset::{load_dataset, BlobParams, CifarVariant, Dataset, DatasetSource, Split};
use crate::error::{Result, TrainError};

/// Which loss drives the student and which teachers supply it.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSpec {
    pub method: LossKind,
    pub teachers: Vec<PathBuf>,
    pub kd: KdParams<f32>,
    pub feature: FeatureLossParams<f32>,
    pub kd_ensemble: KdEnsemble,
    pub ntl_style: NtlStyle,
    /// Gives every NTL the same initialization instead of one seed each.
    pub shared_ntl_seed: bool,
    /// Paraphraser compression rate for factor transfer.
    pub paraphraser_rate: f64,
    /// Paraphraser pre-training length as a fraction of `epochs`, run
    /// before student training starts.
    pub ft_pretrain_fraction: f64,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            method: LossKind::Ce,
            teachers: Vec::new(),
            kd: KdParams::default(),
            feature: FeatureLossParams::default(),
            kd_ensemble: KdEnsemble::default(),
            ntl_style: NtlStyle::default(),
            shared_ntl_seed: false,
            paraphraser_rate: 0.5,
            ft_pretrain_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Cifar10,
    Cifar100,
    Idx,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Cifar10 => "cifar10",
            DataKind::Cifar100 => "cifar100",
            DataKind::Idx => "idx",
        })
    }
}

impl FromStr for DataKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" | "synthetic-blobs" => Ok(DataKind::Synthetic),
            "cifar10" => Ok(DataKind::Cifar10),
            "cifar100" => Ok(DataKind::Cifar100),
            "idx" => Ok(DataKind::Idx),
            _ => Err(TrainError::Config(format!(
                "unknown dataset {s:?} (synthetic|cifar10|cifar100|idx)"
            ))),
        }
    }
}

/// Where the train and test splits come from and how they are prepared.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Synthetic generator; `samples_per_class` sizes the train split.
    pub blobs: BlobParams,
    pub test_samples_per_class: usize,
    /// CIFAR: a directory with the standard batch files, or one file.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// IDX label files; the image files are `train_path`/`test_path`.
    pub train_labels: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Class count for IDX data.
    pub num_classes: usize,
    /// Standardize channels with train-split statistics.
    pub normalize: bool,
    /// Random crop + flip; `None` means on for file datasets, off for
    /// synthetic ones.
    pub augment: Option<bool>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            blobs: BlobParams::default(),
            test_samples_per_class: 50,
            train_path: None,
            test_path: None,
            train_labels: None,
            test_labels: None,
            num_classes: 10,
            normalize: true,
            augment: None,
        }
    }
}

/// Both splits, normalized consistently.
#[derive(Clone, Debug, PartialEq)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn augment(&self) -> bool {
        self.augment.unwrap_or(self.kind != DataKind::Synthetic)
    }

    fn path(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| TrainError::Config(format!("dataset {} needs {key}", self.kind)))
    }

    pub fn source(&self, split: Split) -> Result<DatasetSource> {
        let (path_key, labels_key) = match split {
            Split::Train => ("train_path", "train_labels"),
            Split::Test => ("test_path", "test_labels"),
        };
        let (path, labels) = match split {
            Split::Train => (&self.train_path, &self.train_labels),
            Split::Test => (&self.test_path, &self.test_labels),
        };
        Ok(match self.kind {
            DataKind::Synthetic => DatasetSource::SyntheticBlobs {
                params: match split {
                    Split::Train => self.blobs.clone(),
                    Split::Test => BlobParams {
                        samples_per_class: self.test_samples_per_class,
                        ..self.blobs.clone()
                    },
                },
                split,
            },
            DataKind::Cifar10 | DataKind::Cifar100 => DatasetSource::CifarBinary {
                path: self.path(path, path_key)?,
                variant: if self.kind == DataKind::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                },
                split,
            },
            DataKind::Idx => DatasetSource::Idx {
                images: self.path(path, path_key)?,
                labels: self.path(labels, labels_key)?,
                num_classes: self.num_classes,
            },
        })
    }

    pub fn load(&self) -> Result<Data> {
        let mut train = load_dataset(&self.source(Split::Train)?)?;
        let mut test = load_dataset(&self.source(Split::Test)?)?;
        if train.num_classes != test.num_classes || train.image_shape() != test.image_shape() {
            return Err(TrainError::Format(format!(
                "train split is {:?} with {} classes but test split is {:?} with {}",
                train.image_shape(),
                train.num_classes,
                test.image_shape(),
                test.num_classes
            )));
        }
        if self.normalize {
            let (mean, std) = train.channel_stats();
            train.normalize(mean, std);
            test.normalize(mean, std);
        }
        Ok(Data { train, test })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Prefix of every output file.
    pub run_id: String,
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, multiplier)` pairs; from `epoch` (0-based) on, the rate is
    /// multiplied by every multiplier whose epoch has been reached.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub distill: DistillSpec,
    pub data: DataConfig,
    /// Checkpoint and metric files are written here when set.
    pub out_dir: Option<PathBuf>,
    /// sFEED generation recorded in outputs; 0 outside a chain.
    pub stack: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            arch: Arch::ResNet {
                depth: 20,
                classes: 10,
            },
            epochs: 40,
            batch_size: 128,
            lr: 0.1,
            lr_schedule: vec![(20, 0.1), (30, 0.1)],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            distill: DistillSpec::default(),
            data: DataConfig::default(),
            out_dir: None,
            stack: 0,
        }
    }
}

/// Keys understood by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "run_id",
    "arch",
    "epochs",
    "batch_size",
    "lr",
    "lr_schedule",
    "momentum",
    "weight_decay",
    "seed",
    "method",
    "teachers",
    "alpha",
    "temperature",
    "beta",
    "eps",
    "normalize_scope",
    "kd_ensemble",
    "ntl_style",
    "shared_ntl_seed",
    "paraphraser_rate",
    "ft_pretrain_fraction",
    "dataset",
    "classes",
    "samples_per_class",
    "test_samples_per_class",
    "image_size",
    "noise_sigma",
    "data_seed",
    "train_path",
    "test_path",
    "train_labels",
    "test_labels",
    "normalize",
    "augment",
    "out_dir",
    "stack",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| TrainError::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(TrainError::Config(format!(
            "invalid boolean {v:?} for {key}"
        ))),
    }
}

fn parse_schedule(v: &str) -> Result<Vec<(usize, f64)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (e, m) = item.split_once(':').ok_or_else(|| {
                TrainError::Config(format!(
                    "lr_schedule entry {item:?} is not epoch:multiplier"
                ))
            })?;
            Ok((parse("lr_schedule", e)?, parse("lr_schedule", m)?))
        })
        .collect()
}

impl TrainConfig {
    /// Applies one `key=value` setting; `Ok(false)` means the key is not a
    /// training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let d = &mut self.distill;
        let data = &mut self.data;
        match key {
            "run_id" => self.run_id = v.to_string(),
            "arch" => {
                self.arch = v
                    .parse()
                    .map_err(|e| TrainError::Config(format!("arch: {e}")))?
            }
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = parse_schedule(v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "method" => {
                d.method = v
                    .parse()
                    .map_err(|e| TrainError::Config(format!("method: {e}")))?
            }
            "teachers" => {
                d.teachers = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "alpha" => d.kd.alpha = parse(key, v)?,
            "temperature" => d.kd.temperature = parse(key, v)?,
            "beta" => d.feature.beta = parse(key, v)?,
            "eps" => d.feature.eps = parse(key, v)?,
            "normalize_scope" => {
                d.feature.scope = v.parse().map_err(|e| TrainError::Config(format!("{e}")))?
            }
            "kd_ensemble" => {
                d.kd_ensemble = v.parse().map_err(|e| TrainError::Config(format!("{e}")))?
            }
            "ntl_style" => {
                d.ntl_style = v.parse().map_err(|e| TrainError::Config(format!("{e}")))?
            }
            "shared_ntl_seed" => d.shared_ntl_seed = parse_bool(key, v)?,
            "paraphraser_rate" => d.paraphraser_rate = parse(key, v)?,
            "ft_pretrain_fraction" => d.ft_pretrain_fraction = parse(key, v)?,
            "dataset" => data.kind = v.parse()?,
            "classes" => {
                data.blobs.num_classes = parse(key, v)?;
                data.num_classes = data.blobs.num_classes;
            }
            "samples_per_class" => data.blobs.samples_per_class = parse(key, v)?,
            "test_samples_per_class" => data.test_samples_per_class = parse(key, v)?,
            "image_size" => data.blobs.image_size = parse(key, v)?,
            "noise_sigma" => data.blobs.noise_sigma = parse(key, v)?,
            "data_seed" => data.blobs.seed = parse(key, v)?,
            "train_path" => data.train_path = Some(v.into()),
            "test_path" => data.test_path = Some(v.into()),
            "train_labels" => data.train_labels = Some(v.into()),
            "test_labels" => data.test_labels = Some(v.into()),
            "normalize" => data.normalize = parse_bool(key, v)?,
            "augment" => data.augment = Some(parse_bool(key, v)?),
            "out_dir" => self.out_dir = Some(v.into()),
            "stack" => self.stack = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from defaults plus `settings`, rejecting unknown keys.
    pub fn from_pairs<'a, I>(settings: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = Self::default();
        for (k, v) in settings {
            if !cfg.set(k, v)? {
                return Err(TrainError::Config(format!(
                    "unknown key {k:?}; valid keys: {}",
                    TRAIN_KEYS.join(", ")
                )));
            }
        }
        Ok(cfg)
    }

    /// The settings as `key=value` pairs that [`TrainConfig::from_pairs`]
    /// maps back to an equal config.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let d = &self.distill;
        let data = &self.data;
        let mut m = BTreeMap::new();
        m.insert("run_id", self.run_id.clone());
        m.insert("arch", self.arch.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert(
            "lr_schedule",
            self.lr_schedule
                .iter()
                .map(|(e, f)| format!("{e}:{f}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("momentum", self.momentum.to_string());
        m.insert("weight_decay", self.weight_decay.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("method", d.method.to_string());
        m.insert(
            "teachers",
            d.teachers
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("alpha", d.kd.alpha.to_string());
        m.insert("temperature", d.kd.temperature.to_string());
        m.insert("beta", d.feature.beta.to_string());
        m.insert("eps", d.feature.eps.to_string());
        m.insert("normalize_scope", d.feature.scope.to_string());
        m.insert("kd_ensemble", d.kd_ensemble.to_string());
        m.insert("ntl_style", d.ntl_style.to_string());
        m.insert("shared_ntl_seed", d.shared_ntl_seed.to_string());
        m.insert("paraphraser_rate", d.paraphraser_rate.to_string());
        m.insert("ft_pretrain_fraction", d.ft_pretrain_fraction.to_string());
        m.insert("dataset", data.kind.to_string());
        m.insert("classes", data.blobs.num_classes.to_string());
        m.insert(
            "samples_per_class",
            data.blobs.samples_per_class.to_string(),
        );
        m.insert(
            "test_samples_per_class",
            data.test_samples_per_class.to_string(),
        );
        m.insert("image_size", data.blobs.image_size.to_string());
        m.insert("noise_sigma", data.blobs.noise_sigma.to_string());
        m.insert("data_seed", data.blobs.seed.to_string());
        for (k, p) in [
            ("train_path", &data.train_path),
            ("test_path", &data.test_path),
            ("train_labels", &data.train_labels),
            ("test_labels", &data.test_labels),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = p {
                m.insert(k, p.display().to_string());
            }
        }
        m.insert("normalize", data.normalize.to_string());
        if let Some(a) = data.augment {
            m.insert("augment", a.to_string());
        }
        m.insert("stack", self.stack.to_string());
        m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad(format!(
                "lr/momentum/weight_decay must be >= 0, got {}/{}/{}",
                self.lr, self.momentum, self.weight_decay
            ));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad(format!(
                "lr_schedule epochs must be strictly increasing: {:?}",
                self.lr_schedule
            ));
        }
        if self
            .lr_schedule
            .iter()
            .any(|&(_, m)| !(m >= 0.0 && m.is_finite()))
        {
            return bad(format!(
                "lr_schedule multipliers must be finite and >= 0: {:?}",
                self.lr_schedule
            ));
        }
        if self.arch.num_classes().is_none() {
            return bad(format!("{} is not a classifier", self.arch));
        }
        let d = &self.distill;
        if d.method.needs_teacher() && d.teachers.is_empty() {
            return bad(format!("method {} needs at least one teacher", d.method));
        }
        if !d.method.needs_teacher() && !d.teachers.is_empty() {
            return bad("method ce takes no teachers".into());
        }
        if d.method == LossKind::Ban && d.teachers.len() != 1 {
            return bad(format!(
                "ban distills from exactly one teacher, got {}",
                d.teachers.len()
            ));
        }
        d.kd.validate()?;
        d.feature.validate()?;
        if !(d.ft_pretrain_fraction > 0.0 && d.ft_pretrain_fraction <= 1.0) {
            return bad(format!(
                "ft_pretrain_fraction must be in (0, 1], got {}",
                d.ft_pretrain_fraction
            ));
        }
        if !(d.paraphraser_rate > 0.0 && d.paraphraser_rate <= 1.0) {
            return bad(format!(
                "paraphraser_rate must be in (0, 1], got {}",
                d.paraphraser_rate
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .fold(self.lr, |lr, &(_, m)| lr * m)
    }

    /// Paraphraser pre-training epochs for factor transfer.
    pub fn ft_pretrain_epochs(&self) -> usize {
        ((self.epochs as f64 * self.distill.ft_pretrain_fraction).ceil() as usize).max(1)
    }
}
