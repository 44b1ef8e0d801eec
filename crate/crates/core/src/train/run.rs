use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_batch, epoch_batches, mixup_batch, Augmenter, BinaryFormat, ChannelStats, Dataset,
    LabelLayout, Normalizer, RawDataset,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{Network, NetworkSpec};
use crate::tensor::checkpoint::WeightFile;
use crate::tensor::{Precision, Real, Tensor};
use crate::train::config::{lr_at, TrainConfig};
use crate::train::eval::evaluate;
use crate::train::sgd::{sgd_step, SgdParams, Velocity};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const VELOCITY_PREFIX: &str = "velocity/";

/// One row of the metrics log. Accuracy and error are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_err: f64,
    pub seconds: f64,
}

/// Record layout and normalization of the data a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub labels: LabelLayout,
    pub image_size: usize,
    pub class_count: usize,
    /// Standardization statistics; absent for divide-by-255.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<ChannelStats>,
}

impl DataMeta {
    pub fn format(&self) -> BinaryFormat {
        BinaryFormat {
            labels: self.labels,
            image_size: self.image_size,
            class_count: self.class_count,
        }
    }

    pub fn normalizer(&self) -> Normalizer {
        match self.stats {
            Some(s) => Normalizer::Standardize(s),
            None => Normalizer::Scale255,
        }
    }
}

/// Sidecar written next to a checkpoint's weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub precision: Precision,
    pub data: DataMeta,
    pub network: NetworkSpec,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

impl CheckpointMeta {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = meta_path(checkpoint);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Loads a trained network and its data description from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let meta = CheckpointMeta::load(path)?;
    let weights = WeightFile::load(path)?;
    let mut net = Network::build(&meta.network, 0)?;
    net.load_weight_file(&weights)?;
    Ok((net, meta))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // the header is written even for an empty log
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "lr",
            "train_loss",
            "train_acc",
            "eval_err",
            "seconds",
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Trains one network on one dataset according to a [`TrainConfig`].
pub struct Trainer<T: Real> {
    cfg: TrainConfig,
    net: Network<T>,
    velocity: Velocity<T>,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
    train: Dataset,
    eval: Option<Dataset>,
    data: DataMeta,
    output: Option<PathBuf>,
}

impl<T: Real> Trainer<T> {
    /// Fits normalization on the training split and builds the network from `cfg.seed`.
    pub fn new(cfg: TrainConfig, train: &RawDataset, eval: Option<&RawDataset>) -> Result<Self> {
        cfg.validate()?;
        let normalizer = cfg.data.normalization.fit(train);
        let spec = &cfg.network;
        if train.image_size != spec.input_size {
            return Err(Error::Config(format!(
                "images are {0}×{0} but network.input_size is {1}",
                train.image_size, spec.input_size
            )));
        }
        if train.class_count > spec.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but network.num_classes is {}",
                train.class_count, spec.num_classes
            )));
        }
        let net = Network::build(spec, cfg.seed)?;
        let data = DataMeta {
            labels: cfg
                .data
                .binary_format()
                .map(|f| f.labels)
                .unwrap_or(LabelLayout::Single),
            image_size: train.image_size,
            class_count: train.class_count,
            stats: match normalizer {
                Normalizer::Standardize(s) => Some(s),
                Normalizer::Scale255 => None,
            },
        };
        Ok(Trainer {
            velocity: Velocity::zeros(net.store()),
            net,
            epoch: 0,
            metrics: Vec::new(),
            train: train.normalize(&normalizer),
            eval: eval.map(|e| e.normalize(&normalizer)),
            data,
            cfg,
            output: None,
        })
    }

    /// Loads data as configured; relative paths resolve against `base`.
    pub fn from_config(cfg: TrainConfig, base: &Path) -> Result<Self> {
        let (train, test) = cfg.data.load(base)?;
        Self::new(cfg, &train, test.as_ref())
    }

    /// Writes the metrics log and checkpoints into `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output = Some(dir.into());
        self
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.output.as_ref().map(|d| d.join(CHECKPOINT_FILE))
    }

    fn sgd(&self, epoch: usize) -> SgdParams {
        SgdParams {
            lr: lr_at(epoch, &self.cfg),
            momentum: self.cfg.momentum,
            nesterov: self.cfg.nesterov,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Forward, backward and update on one batch; returns (summed loss, correct count).
    fn step(
        &mut self,
        x: Tensor<f32>,
        targets: &[(usize, usize)],
        lambda: f64,
        hp: &SgdParams,
    ) -> Result<(f64, f64)> {
        let (arch, store) = self.net.parts_mut();
        let mut g = Graph::new(store, true);
        let input = g.input(x.cast());
        let logits = arch.forward(&mut g, input)?;
        let loss = g.tape.cross_entropy(logits, targets, T::of(lambda))?;
        let n = targets.len();
        let loss_value = g.value(loss).data()[0].as_f64() * n as f64;
        let classes = g.value(logits).shape()[1];
        let correct: f64 = g
            .value(logits)
            .data()
            .chunks(classes)
            .zip(targets)
            .map(|(row, &(a, b))| {
                let pred = argmax(row);
                lambda * (pred == a) as u8 as f64 + (1.0 - lambda) * (pred == b) as u8 as f64
            })
            .sum();
        g.backward(loss)?;
        sgd_step(self.net.store_mut(), &mut self.velocity, hp)?;
        Ok((loss_value, correct))
    }

    /// Runs the next epoch and appends its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let start = Instant::now();
        let hp = self.sgd(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mixup = self.cfg.mixup.active(epoch, self.cfg.epochs);
        let augmenter = self.cfg.data.augment.then(Augmenter::default);
        let batches = epoch_batches(self.train.len(), self.cfg.batch_size, &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0.0);
        for (step, idx) in batches.iter().enumerate() {
            let (mut x, labels) = self.train.batch(idx)?;
            if let Some(aug) = &augmenter {
                x = augment_batch(&x, aug, &mut rng)?;
            }
            let (x, targets, lambda) = if mixup {
                let m = mixup_batch(&x, &labels, &self.cfg.mixup, &mut rng)?;
                (m.images, m.targets, m.lambda)
            } else {
                (x, labels.iter().map(|&y| (y, y)).collect(), 1.0)
            };
            let (l, c) = self.step(x, &targets, lambda, &hp).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: l,
                });
            }
            loss_sum += l;
            correct += c;
        }
        let n = self.train.len() as f64;
        let eval_set = self.eval.as_ref().unwrap_or(&self.train);
        let eval_err = evaluate(&mut self.net, eval_set, self.cfg.batch_size)?;
        let row = EpochMetrics {
            epoch,
            lr: hp.lr,
            train_loss: loss_sum / n,
            train_acc: 100.0 * correct / n,
            eval_err,
            seconds: if self.cfg.timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.metrics.push(row.clone());
        self.epoch += 1;
        Ok(row)
    }

    /// Trains through every remaining epoch, writing logs and checkpoints.
    pub fn run(&mut self) -> Result<&[EpochMetrics]> {
        self.run_with(|_| {})
    }

    /// [`Trainer::run`] with a callback after each epoch's files are written.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<&[EpochMetrics]> {
        if let Some(dir) = &self.output {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let total = self.cfg.total_epochs();
        while self.epoch < total {
            self.run_epoch()?;
            if let Some(dir) = self.output.clone() {
                write_metrics_csv(&dir.join(METRICS_FILE), &self.metrics)?;
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.epoch.is_multiple_of(every)) || self.epoch == total {
                    self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            if let Some(m) = self.metrics.last() {
                on_epoch(m);
            }
        }
        Ok(&self.metrics)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = self.net.to_weight_file();
        for (p, v) in self.net.store().iter().zip(&self.velocity.buffers) {
            if p.trainable() {
                let t = Tensor::new(p.value.shape().to_vec(), v.clone())?;
                file.push(format!("{VELOCITY_PREFIX}{}", p.name), &t);
            }
        }
        let meta = CheckpointMeta {
            epoch: self.epoch,
            config_hash: format!("{:016x}", self.cfg.hash()),
            precision: self.cfg.precision,
            data: self.data,
            network: self.cfg.network.clone(),
            metrics: self.metrics.clone(),
        };
        let mut bytes = Vec::new();
        file.encode(&mut bytes).map_err(|e| Error::io(path, e))?;
        write_atomic(path, &bytes)?;
        let text = toml::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        write_atomic(&meta_path(path), text.as_bytes())
    }

    /// Restores weights, velocities, epoch and metrics from a checkpoint
    /// written by the same configuration.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta::load(path)?;
        let hash = format!("{:016x}", self.cfg.hash());
        if meta.config_hash != hash {
            return Err(Error::Config(format!(
                "checkpoint {} was written by a different configuration ({} vs {hash})",
                path.display(),
                meta.config_hash
            )));
        }
        let file = WeightFile::load(path)?;
        self.net.load_weight_file(&file)?;
        let mut velocity = Velocity::zeros(self.net.store());
        for (p, v) in self.net.store().iter().zip(&mut velocity.buffers) {
            if !p.trainable() {
                continue;
            }
            let name = format!("{VELOCITY_PREFIX}{}", p.name);
            let t = file
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("resume", "velocity", p.value.len(), t.len()));
            }
            *v = t.data().iter().map(|&x| T::of(x as f64)).collect();
        }
        self.velocity = velocity;
        self.epoch = meta.epoch;
        self.metrics = meta.metrics;
        Ok(())
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Trains at the configured precision and returns the metrics log.
pub fn train_from_config(
    cfg: TrainConfig,
    base: &Path,
    resume: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    let out = base.join(&cfg.output);
    match cfg.precision {
        Precision::F32 => run_at::<f32>(cfg, base, out, resume),
        Precision::F64 => run_at::<f64>(cfg, base, out, resume),
    }
}

fn run_at<T: Real>(
    cfg: TrainConfig,
    base: &Path,
    out: PathBuf,
    resume: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    let mut t = Trainer::<T>::from_config(cfg, base)?.with_output(out);
    if let Some(p) = resume {
        t.resume(p)?;
    }
    Ok(t.run()?.to_vec())
}
