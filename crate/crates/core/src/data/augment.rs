use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// One sample's augmentation: a shift (the pad-and-crop offset minus the
/// padding) and an optional horizontal mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dx: isize,
    pub dy: isize,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dx: 0,
        dy: 0,
        flip: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmenter {
    pub pad: usize,
    pub flip: bool,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter { pad: 4, flip: true }
    }
}

impl Augmenter {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let p = self.pad as i64;
        AugmentDraw {
            dx: rng.random_range(-p..=p) as isize,
            dy: rng.random_range(-p..=p) as isize,
            flip: self.flip && rng.random_bool(0.5),
        }
    }
}

/// Shifts an `s × s × 3` image by `(dx, dy)`, filling uncovered pixels with zero.
pub fn translate(img: &[f32], size: usize, dx: isize, dy: isize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    let s = size as isize;
    for y in 0..s {
        let sy = y + dy;
        if !(0..s).contains(&sy) {
            continue;
        }
        for x in 0..s {
            let sx = x + dx;
            if !(0..s).contains(&sx) {
                continue;
            }
            let (d, o) = (((y * s + x) * 3) as usize, ((sy * s + sx) * 3) as usize);
            out[d..d + 3].copy_from_slice(&img[o..o + 3]);
        }
    }
    out
}

pub fn flip_horizontal(img: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let (d, o) = ((y * size + x) * 3, (y * size + size - 1 - x) * 3);
            out[d..d + 3].copy_from_slice(&img[o..o + 3]);
        }
    }
    out
}

fn apply(img: &[f32], size: usize, d: AugmentDraw) -> Vec<f32> {
    let shifted = if d.dx == 0 && d.dy == 0 {
        img.to_vec()
    } else {
        translate(img, size, d.dx, d.dy)
    };
    if d.flip {
        flip_horizontal(&shifted, size)
    } else {
        shifted
    }
}

/// Augments every sample of a `[N, s, s, 3]` batch with one draw each.
pub fn augment_batch<R: Rng + ?Sized>(
    batch: &Tensor<f32>,
    aug: &Augmenter,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let (n, s, _, _) = batch.dims4("augment")?;
    let draws: Vec<_> = (0..n).map(|_| aug.draw(rng)).collect();
    augment_with(batch, &draws, s)
}

pub(crate) fn augment_with(
    batch: &Tensor<f32>,
    draws: &[AugmentDraw],
    s: usize,
) -> Result<Tensor<f32>> {
    let per = s * s * 3;
    let mut data = Vec::with_capacity(batch.len());
    for (img, &d) in batch.data().chunks_exact(per).zip(draws) {
        data.extend(apply(img, s, d));
    }
    Tensor::new(batch.shape().to_vec(), data)
}
