//! Image datasets: CIFAR-style binary files, synthetic patterns,
//! normalization, augmentation and mixup.

mod augment;
mod cifar;
mod mixup;
mod synth;

pub use augment::{augment_batch, flip_horizontal, translate, AugmentDraw, Augmenter};
pub use cifar::{load_cifar_binary, write_cifar_binary, BinaryFormat, LabelLayout};
pub use mixup::{mixup_batch, sample_lambda, MixedBatch, MixupConfig};
pub use synth::{synth_dataset, SynthManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Undecoded 8-bit images, `N × size × size × 3` channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub image_size: usize,
    pub split: Split,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> ChannelStats {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let n = (self.pixels.len() / 3).max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0f64; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        ChannelStats { mean, std }
    }

    /// Decodes to floats; the only way to obtain a [`Dataset`].
    pub fn normalize(&self, norm: &Normalizer) -> Dataset {
        let data: Vec<f32> = match norm {
            Normalizer::Scale255 => self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            Normalizer::Standardize(s) => self
                .pixels
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let c = i % 3;
                    ((p as f64 - s.mean[c]) / s.std[c].max(1e-12)) as f32
                })
                .collect(),
        };
        let s = self.image_size;
        let n = self.len();
        Dataset {
            images: Tensor::new(vec![n, s, s, 3], data).expect("raw dataset is consistent"),
            labels: self.labels.clone(),
            class_count: self.class_count,
            split: self.split,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalizer {
    /// Subtract the per-channel mean and divide by the standard deviation.
    Standardize(ChannelStats),
    /// Divide by 255.
    Scale255,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    #[default]
    Standardize,
    Scale255,
}

impl NormalizationKind {
    /// Builds the normalizer from training-split statistics.
    pub fn fit(self, train: &RawDataset) -> Normalizer {
        match self {
            NormalizationKind::Standardize => Normalizer::Standardize(train.channel_stats()),
            NormalizationKind::Scale255 => Normalizer::Scale255,
        }
    }
}

/// Normalized images and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        let (n, _, _, c) = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(Error::dim("dataset", "batch", n, labels.len()));
        }
        if c != 3 {
            return Err(Error::dim("dataset", "channels", 3, c));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((
            self.images.select_batch(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Splits a shuffled permutation of `0..n` into batches of `batch_size`;
/// the last batch may be short.
pub fn epoch_batches<R: rand::Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}
