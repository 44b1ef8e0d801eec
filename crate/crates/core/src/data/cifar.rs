use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{RawDataset, Split};
use crate::error::{Error, Result};

/// Label bytes preceding each record's pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelLayout {
    /// One label byte (CIFAR-10).
    Single,
    /// Coarse then fine label byte (CIFAR-100); the fine label is used.
    CoarseFine,
}

/// Record layout: label byte(s), then R, G and B planes, each row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryFormat {
    pub labels: LabelLayout,
    pub image_size: usize,
    pub class_count: usize,
}

impl BinaryFormat {
    pub const CIFAR10: BinaryFormat = BinaryFormat {
        labels: LabelLayout::Single,
        image_size: 32,
        class_count: 10,
    };
    pub const CIFAR100: BinaryFormat = BinaryFormat {
        labels: LabelLayout::CoarseFine,
        image_size: 32,
        class_count: 100,
    };

    fn label_bytes(&self) -> usize {
        match self.labels {
            LabelLayout::Single => 1,
            LabelLayout::CoarseFine => 2,
        }
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes() + 3 * self.image_size * self.image_size
    }
}

/// Reads one binary batch file.
pub fn load_cifar_binary(path: &Path, format: BinaryFormat, split: Split) -> Result<RawDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, format, split)
}

fn decode(bytes: &[u8], path: &Path, format: BinaryFormat, split: Split) -> Result<RawDataset> {
    let rec = format.record_len();
    let lb = format.label_bytes();
    let plane = format.image_size * format.image_size;
    if bytes.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "empty file".into(),
        });
    }
    if !bytes.len().is_multiple_of(rec) {
        let offset = (bytes.len() - bytes.len() % rec) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!(
                "truncated record starting at byte {offset}: records are {rec} bytes, file has {} trailing",
                bytes.len() % rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = vec![0u8; n * plane * 3];
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[lb - 1] as usize;
        if label >= format.class_count {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * rec + lb - 1) as u64,
                msg: format!(
                    "label {label} outside [0, {}); misaligned record?",
                    format.class_count
                ),
            });
        }
        labels.push(label);
        let img = &r[lb..];
        let out = &mut pixels[i * plane * 3..(i + 1) * plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = img[c * plane + p];
            }
        }
    }
    Ok(RawDataset {
        pixels,
        labels,
        class_count: format.class_count,
        image_size: format.image_size,
        split,
    })
}

pub fn write_cifar_binary(path: &Path, data: &RawDataset, labels: LabelLayout) -> Result<()> {
    let plane = data.image_size * data.image_size;
    let mut out = Vec::with_capacity(data.len() * (2 + 3 * plane));
    for (i, &label) in data.labels.iter().enumerate() {
        let label = u8::try_from(label)
            .map_err(|_| Error::Config(format!("label {label} does not fit a byte")))?;
        if labels == LabelLayout::CoarseFine {
            out.push(0);
        }
        out.push(label);
        let img = &data.pixels[i * plane * 3..(i + 1) * plane * 3];
        for c in 0..3 {
            out.extend((0..plane).map(|p| img[p * 3 + c]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
