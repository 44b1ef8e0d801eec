//! Excitation traces, per-block statistics and inner-image exports.

mod export;

pub use export::{
    ascii_heatmap, export_inner_images, inner_images, read_inner_images, write_excitations,
    InnerImage, MatrixRow, Phase, EXCITATION_FILE, HEATMAP_FILE, INNER_IMAGE_FILE,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, MapSnapshot};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Real, Tensor};

pub const STATS_FILE: &str = "attention_stats.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMeta {
    /// Position of the block in the network, from 0.
    pub index: usize,
    pub stage: usize,
    pub channels: usize,
    pub mode: AttentionMode,
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub meta: BlockMeta,
    pub batch: usize,
    /// `batch × channels`, row-major.
    pub excitation: Vec<f64>,
    /// Pair-view map before the inner-imaging convolution.
    pub map: Option<MapSnapshot>,
}

impl BlockTrace {
    pub fn sample(&self, i: usize) -> &[f64] {
        let c = self.meta.channels;
        &self.excitation[i * c..(i + 1) * c]
    }
}

/// Excitation vectors of every residual block for one probe batch.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub blocks: Vec<BlockTrace>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// A trace from raw excitation rows, one `Vec` of samples per block.
    pub fn from_vectors(mode: AttentionMode, blocks: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(index, samples)| {
                let channels = samples.first().map_or(0, Vec::len);
                if samples.iter().any(|s| s.len() != channels) {
                    return Err(Error::dim("attention_trace", "channels", channels, 0));
                }
                Ok(BlockTrace {
                    meta: BlockMeta {
                        index,
                        stage: 0,
                        channels,
                        mode,
                    },
                    batch: samples.len(),
                    excitation: samples.concat(),
                    map: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttentionTrace { blocks })
    }
}

/// Runs `probe` through `net` in eval mode and records every attention unit.
pub fn capture_trace<T: Real>(net: &mut Network<T>, probe: &Tensor<T>) -> Result<AttentionTrace> {
    let mode = net.spec().attention.mode;
    if mode == AttentionMode::None {
        return Err(Error::Config(
            "attention mode `none` computes no excitation; build the network with an attention mode to trace it".into(),
        ));
    }
    let (_, records) = net.forward_recorded(probe, false, true)?;
    let blocks = net.blocks();
    if records.len() != blocks.len() {
        return Err(Error::dim(
            "capture_trace",
            "blocks",
            blocks.len(),
            records.len(),
        ));
    }
    let blocks = records
        .into_iter()
        .zip(blocks)
        .enumerate()
        .map(|(index, (r, b))| BlockTrace {
            meta: BlockMeta {
                index,
                stage: b.spec.stage,
                channels: r.channels,
                mode: r.mode,
            },
            batch: r.batch,
            excitation: r.excitation,
            map: r.map,
        })
        .collect();
    Ok(AttentionTrace { blocks })
}

/// Zeroes every trainable attention parameter, which pins each excitation at σ(0) = 0.5.
pub fn neutralize_attention<T: Real>(net: &mut Network<T>) {
    for p in net.store_mut().iter_mut() {
        if p.trainable() && p.name.contains(".attn") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStats {
    pub blocks: Vec<BlockStats>,
}

/// Mean over channels and samples; population variance over channels
/// within each sample, averaged over samples.
pub fn stats(trace: &AttentionTrace) -> AttentionStats {
    let blocks = trace
        .blocks
        .iter()
        .map(|b| {
            let (mut mean, mut variance) = (0.0, 0.0);
            for i in 0..b.batch {
                let s = b.sample(i);
                let m = s.iter().sum::<f64>() / s.len() as f64;
                mean += m;
                variance += s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s.len() as f64;
            }
            let n = b.batch.max(1) as f64;
            BlockStats {
                block: b.meta.index,
                mean: mean / n,
                variance: variance / n,
            }
        })
        .collect();
    AttentionStats { blocks }
}

impl AttentionStats {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.blocks.is_empty() {
            w.write_record(["block", "mean", "variance"])
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        for b in &self.blocks {
            w.serialize(b).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let blocks = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Ok(AttentionStats { blocks })
    }
}
