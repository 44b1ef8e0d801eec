use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{RawDataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub class_count: usize,
    pub n_per_class: usize,
    pub seed: u64,
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// Samples per class in the test split.
    #[serde(default)]
    pub test_per_class: usize,
    /// Output directory for the CLI; relative paths resolve against the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_size() -> usize {
    32
}

impl SynthManifest {
    pub fn new(class_count: usize, n_per_class: usize, seed: u64) -> Self {
        SynthManifest {
            class_count,
            n_per_class,
            seed,
            image_size: 16,
            test_per_class: 0,
            output: None,
        }
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: SynthManifest = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > 256 {
            return Err(Error::Config("class_count must be in 1..=256".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        Ok(())
    }
}

/// Per-class pattern: a color tint, a Gaussian blob at a class-specific
/// position and a grating with class-specific orientation.
struct ClassPattern {
    tint: [f64; 3],
    center: (f64, f64),
    orientation: f64,
}

impl ClassPattern {
    fn new(k: usize, classes: usize, size: usize) -> Self {
        let a = TAU * k as f64 / classes as f64;
        let s = size as f64;
        ClassPattern {
            tint: [a.cos(), (a - TAU / 3.0).cos(), (a + TAU / 3.0).cos()].map(|c| 40.0 * c),
            center: (s / 2.0 + 0.28 * s * a.cos(), s / 2.0 + 0.28 * s * a.sin()),
            orientation: a / 2.0,
        }
    }
}

/// Deterministic separable images; sample `i` has label `i mod class_count`.
pub fn synth_dataset(m: &SynthManifest, split: Split) -> RawDataset {
    let per_class = match split {
        Split::Train => m.n_per_class,
        Split::Test => m.test_per_class,
    };
    let salt = match split {
        Split::Train => 0,
        Split::Test => 0x9e37_79b9_7f4a_7c15,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed ^ salt);
    let noise = Normal::new(0.0, 18.0).expect("valid normal");
    let s = m.image_size;
    let patterns: Vec<_> = (0..m.class_count)
        .map(|k| ClassPattern::new(k, m.class_count, s))
        .collect();
    let n = per_class * m.class_count;
    let mut pixels = Vec::with_capacity(n * s * s * 3);
    let mut labels = Vec::with_capacity(n);
    let radius = (s as f64 / 6.0).max(1.0);
    for i in 0..n {
        let k = i % m.class_count;
        let p = &patterns[k];
        let (jx, jy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let phase = rng.random_range(0.0..TAU);
        let freq = TAU * 3.0 / s as f64;
        let (co, so) = (p.orientation.cos(), p.orientation.sin());
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f64, y as f64);
                let d2 = (fx - p.center.0 - jx).powi(2) + (fy - p.center.1 - jy).powi(2);
                let blob = 70.0 * (-d2 / (2.0 * radius * radius)).exp();
                let grating = 20.0 * (freq * (fx * co + fy * so) + phase).sin();
                for c in 0..3 {
                    let v = 128.0 + p.tint[c] + blob + grating + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(k);
    }
    RawDataset {
        pixels,
        labels,
        class_count: m.class_count,
        image_size: s,
        split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalizer;

    #[test]
    fn size_and_determinism() {
        let m = SynthManifest::new(2, 100, 7);
        let a = synth_dataset(&m, Split::Train);
        assert_eq!(a.len(), 200);
        assert_eq!(a, synth_dataset(&m, Split::Train));
        assert_ne!(
            a,
            synth_dataset(&SynthManifest::new(2, 100, 8), Split::Train)
        );
    }

    /// Multinomial logistic regression on raw pixels, plain gradient descent.
    fn linear_probe_accuracy(m: &SynthManifest) -> f64 {
        let raw = synth_dataset(m, Split::Train);
        let ds = raw.normalize(&Normalizer::Standardize(raw.channel_stats()));
        let d = ds.images.len() / ds.len();
        let k = m.class_count;
        let x = ds.images.data();
        let mut w = vec![0f64; k * d];
        let mut b = vec![0f64; k];
        let lr = 0.5;
        let n = ds.len();
        for _ in 0..100 {
            let mut gw = vec![0f64; k * d];
            let mut gb = vec![0f64; k];
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                let z: Vec<f64> = (0..k)
                    .map(|c| {
                        b[c] + xi
                            .iter()
                            .zip(&w[c * d..(c + 1) * d])
                            .map(|(&a, &w)| a as f64 * w)
                            .sum::<f64>()
                            / d as f64
                    })
                    .collect();
                let mx = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in 0..k {
                    let g = e[c] / sum - (ds.labels[i] == c) as u8 as f64;
                    gb[c] += g / n as f64;
                    for (gw, &a) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                        *gw += g * a as f64 / (n * d) as f64;
                    }
                }
            }
            for (w, g) in w.iter_mut().zip(&gw) {
                *w -= lr * g * d as f64;
            }
            for (b, g) in b.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        let correct = (0..n)
            .filter(|&i| {
                let xi = &x[i * d..(i + 1) * d];
                let pred = (0..k)
                    .map(|c| {
                        b[c] + xi
                            .iter()
                            .zip(&w[c * d..(c + 1) * d])
                            .map(|(&a, &w)| a as f64 * w)
                            .sum::<f64>()
                    })
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                pred == ds.labels[i]
            })
            .count();
        correct as f64 / n as f64
    }

    #[test]
    fn linear_probe_separates_classes() {
        for classes in [2, 4] {
            let acc = linear_probe_accuracy(&SynthManifest::new(classes, 50, 3));
            assert!(acc > 0.8, "{classes} classes: probe accuracy {acc}");
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = SynthManifest::from_toml("class_count = 3\nn_per_class = 5\nseed = 1\n").unwrap();
        assert_eq!(m.image_size, 32);
        assert!(SynthManifest::from_toml(
            "class_count = 3\nn_per_class = 5\nseed = 1\nshape = 2\n"
        )
        .is_err());
        assert!(SynthManifest::from_toml("class_count = 0\nn_per_class = 5\nseed = 1\n").is_err());
    }

    #[test]
    fn test_split_differs_from_train() {
        let mut m = SynthManifest::new(2, 4, 1);
        m.test_per_class = 4;
        assert_ne!(
            synth_dataset(&m, Split::Train).pixels,
            synth_dataset(&m, Split::Test).pixels
        );
    }
}
