use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionMode;
use crate::data::{
    load_cifar_binary, synth_dataset, BinaryFormat, LabelLayout, MixupConfig, NormalizationKind,
    RawDataset, Split, SynthManifest,
};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::tensor::Precision;

/// Names accepted by `preset = "..."`.
pub const PRESETS: [&str; 5] = [
    "preact-cifar",
    "preact-cifar-mixup",
    "wrn-cifar",
    "wrn-cifar-mixup",
    "svhn",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Cifar100,
    /// CIFAR-layout records with a custom image size and class count.
    Binary,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthManifest>,
    #[serde(default)]
    pub normalization: NormalizationKind,
    #[serde(default = "yes")]
    pub augment: bool,
}

fn yes() -> bool {
    true
}

impl DataConfig {
    pub fn synthetic(manifest: SynthManifest) -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train: None,
            test: None,
            class_count: None,
            image_size: None,
            labels: None,
            synthetic: Some(manifest),
            normalization: NormalizationKind::Standardize,
            augment: false,
        }
    }

    pub fn cifar10(train: PathBuf, test: Option<PathBuf>) -> Self {
        DataConfig {
            source: DataSource::Cifar10,
            train: Some(train),
            test,
            class_count: None,
            image_size: None,
            labels: None,
            synthetic: None,
            normalization: NormalizationKind::Standardize,
            augment: true,
        }
    }

    /// Record layout of the file sources.
    pub fn binary_format(&self) -> Result<BinaryFormat> {
        match self.source {
            DataSource::Cifar10 => Ok(BinaryFormat::CIFAR10),
            DataSource::Cifar100 => Ok(BinaryFormat::CIFAR100),
            DataSource::Binary => Ok(BinaryFormat {
                labels: self.labels.unwrap_or(LabelLayout::Single),
                image_size: self.image_size.ok_or_else(|| {
                    Error::Config("data.image_size is required for binary sources".into())
                })?,
                class_count: self.class_count.ok_or_else(|| {
                    Error::Config("data.class_count is required for binary sources".into())
                })?,
            }),
            DataSource::Synthetic => {
                let m = self.manifest()?;
                Ok(BinaryFormat {
                    labels: LabelLayout::Single,
                    image_size: m.image_size,
                    class_count: m.class_count,
                })
            }
        }
    }

    fn manifest(&self) -> Result<&SynthManifest> {
        self.synthetic.as_ref().ok_or_else(|| {
            Error::Config("data.source = \"synthetic\" needs a [data.synthetic] table".into())
        })
    }

    /// Raw train and (optional) test splits; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(RawDataset, Option<RawDataset>)> {
        if self.source == DataSource::Synthetic {
            let m = self.manifest()?;
            m.validate()?;
            let test = (m.test_per_class > 0).then(|| synth_dataset(m, Split::Test));
            return Ok((synth_dataset(m, Split::Train), test));
        }
        let fmt = self.binary_format()?;
        let train = self
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("data.train path is required".into()))?;
        let train = load_cifar_binary(&base.join(train), fmt, Split::Train)?;
        let test = match &self.test {
            Some(p) => Some(load_cifar_binary(&base.join(p), fmt, Split::Test)?),
            None => None,
        };
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset the file started from, kept for reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// `(epoch, divisor)` pairs: from `epoch` on the rate is divided by `divisor`.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub mixup: MixupConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Write wall-clock seconds to the metrics log; off gives a reproducible log.
    #[serde(default = "yes")]
    pub timing: bool,
    /// Write a checkpoint every this many epochs (0 disables).
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub network: NetworkSpec,
    pub data: DataConfig,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (mut cfg, mixup) = match name.strip_suffix("-mixup") {
            Some(base) => (Self::preset(base)?, true),
            None => (
                match name {
                    "preact-cifar" => TrainConfig::base(
                        200,
                        0.1,
                        vec![(100, 10.0), (150, 10.0)],
                        NetworkSpec::preact_resnet(164, AttentionMode::DoubleFc),
                    ),
                    "wrn-cifar" => TrainConfig::base(
                        200,
                        0.1,
                        vec![(60, 5.0), (120, 5.0), (160, 5.0)],
                        NetworkSpec::wrn(28, 10, AttentionMode::DoubleFc),
                    ),
                    "svhn" => {
                        let mut c = TrainConfig::base(
                            160,
                            0.01,
                            vec![(80, 10.0), (120, 10.0)],
                            NetworkSpec::wrn(16, 8, AttentionMode::DoubleFc),
                        );
                        c.data.normalization = NormalizationKind::Scale255;
                        c.data.augment = false;
                        c
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "unknown preset {other:?}; expected one of {}",
                            PRESETS.join(", ")
                        )))
                    }
                },
                false,
            ),
        };
        cfg.mixup.enabled = mixup;
        cfg.preset = Some(name.to_string());
        Ok(cfg)
    }

    fn base(epochs: usize, lr: f64, schedule: Vec<(usize, f64)>, network: NetworkSpec) -> Self {
        TrainConfig {
            preset: None,
            epochs,
            batch_size: 128,
            base_lr: lr,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            schedule,
            mixup: MixupConfig::default(),
            seed: 0,
            precision: Precision::F32,
            timing: true,
            checkpoint_every: 1,
            output: default_output(),
            network,
            data: DataConfig::cifar10(
                PathBuf::from("data_batch.bin"),
                Some(PathBuf::from("test_batch.bin")),
            ),
        }
    }

    /// Parses a config; a top-level `preset` key supplies defaults that the
    /// remaining keys override (tables merge key by key).
    pub fn from_toml(text: &str) -> Result<Self> {
        let parse = |e: toml::de::Error| Error::Parse(e.to_string());
        let table: toml::Table = toml::from_str(text).map_err(parse)?;
        let merged = match table.get("preset") {
            Some(toml::Value::String(name)) => {
                let base = toml::Table::try_from(Self::preset(name)?)
                    .map_err(|e| Error::Parse(e.to_string()))?;
                merge(base, table)
            }
            Some(_) => return Err(Error::Parse("preset must be a string".into())),
            None => table,
        };
        let cfg: TrainConfig = merged.try_into().map_err(parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(
                "base_lr must be a finite non-negative number".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for w in self.schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(
                    "schedule epochs must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&(e, d)) = self.schedule.iter().find(|(_, d)| *d <= 1.0) {
            return Err(Error::Config(format!(
                "schedule divisor at epoch {e} must exceed 1, got {d}"
            )));
        }
        self.mixup.validate()?;
        self.network.validate()?;
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.mixup.total_epochs(self.epochs)
    }

    /// Digest of the canonical serialized form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// Base rate divided by every divisor whose boundary has been reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .fold(cfg.base_lr, |lr, (_, d)| lr / d)
}
