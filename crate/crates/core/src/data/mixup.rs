use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Beta(α, α) concentration.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Plain-training epochs appended after the mixup phase.
    #[serde(default = "default_tail")]
    pub tail_epochs: usize,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_tail() -> usize {
    20
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            enabled: false,
            alpha: default_alpha(),
            tail_epochs: default_tail(),
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Whether mixup applies in `epoch` of a run with `epochs` mixup epochs.
    pub fn active(&self, epoch: usize, epochs: usize) -> bool {
        self.enabled && epoch < epochs
    }

    /// Total epochs including the tail.
    pub fn total_epochs(&self, epochs: usize) -> usize {
        if self.enabled {
            epochs + self.tail_epochs
        } else {
            epochs
        }
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// Mixed inputs plus, per sample, the two labels weighted `λ` and `1 − λ`.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub images: Tensor<f32>,
    pub targets: Vec<(usize, usize)>,
    pub lambda: f64,
}

/// `x̃ᵢ = λ·xᵢ + (1 − λ)·x_π(i)` for a random permutation π.
pub fn mixup_batch<R: Rng + ?Sized>(
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    if !cfg.enabled {
        return Err(Error::Config(
            "mixup_batch called with mixup disabled".into(),
        ));
    }
    cfg.validate()?;
    let lambda = sample_lambda(cfg.alpha, rng)?;
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    perm.shuffle(rng);
    mix_with(images, labels, lambda, &perm)
}

pub(crate) fn mix_with(
    images: &Tensor<f32>,
    labels: &[usize],
    lambda: f64,
    perm: &[usize],
) -> Result<MixedBatch> {
    let (n, _, _, _) = images.dims4("mixup")?;
    if n != labels.len() {
        return Err(Error::dim("mixup", "batch", n, labels.len()));
    }
    let per = images.len() / n;
    let (l, r) = (lambda as f32, (1.0 - lambda) as f32);
    let src = images.data();
    let mut data = Vec::with_capacity(src.len());
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (&src[i * per..(i + 1) * per], &src[j * per..(j + 1) * per]);
        data.extend(a.iter().zip(b).map(|(&x, &y)| l * x + r * y));
    }
    Ok(MixedBatch {
        images: Tensor::new(images.shape().to_vec(), data)?,
        targets: perm
            .iter()
            .enumerate()
            .map(|(i, &j)| (labels[i], labels[j]))
            .collect(),
        lambda,
    })
}
