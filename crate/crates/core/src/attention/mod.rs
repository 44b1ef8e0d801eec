//! Channel attention units for residual blocks.
//!
//! A unit receives the residual branch output `u_r` and the identity
//! tensor `x_id` of one block (both `[batch, h, w, C]`), derives a
//! per-channel excitation `s ∈ (0,1)^C` and returns `s ⊙ u_r + x_id`.
//!
//! | mode          | excitation input                                   |
//! |---------------|----------------------------------------------------|
//! | `none`        | no scaling, plain residual sum                     |
//! | `se`          | squeezed residual only                             |
//! | `double-fc`   | separate FC embeddings of both squeezes, concatenated |
//! | `pairview2x1` | 2×C pair-view map scanned by ε 2×1 kernels          |
//! | `pairview1x1` | 2×C pair-view map scanned by ε 1×1 kernels          |
//! | `folded3x3`   | pair-view folded to n×m, scanned by ε 3×3 kernels   |

pub mod fold;
mod ops;
mod unit;

#[cfg(test)]
mod oracle_tests;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear};

pub use fold::{
    fold_index, fold_values, source_at, unfold_index, unfold_values, valid_fold_shapes,
};
pub use ops::{
    cmpe_double_fc_excite, encode_excite_reimaged, fold, folded_conv_3x3, pairview_conv, se_excite,
    squeeze, stack_pair_view,
};
pub use unit::{AttentionParams, AttentionUnit, DoubleFcParams, ExcitationFc, InnerImagingParams};

use crate::tensor::tape::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "se")]
    Se,
    #[serde(rename = "double-fc", alias = "double_fc", alias = "doublefc")]
    DoubleFc,
    #[serde(rename = "pairview2x1", alias = "pairview-2x1", alias = "2x1")]
    PairView2x1,
    #[serde(rename = "pairview1x1", alias = "pairview-1x1", alias = "1x1")]
    PairView1x1,
    #[serde(rename = "folded3x3", alias = "folded-3x3", alias = "3x3")]
    Folded3x3,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 6] = [
        AttentionMode::None,
        AttentionMode::Se,
        AttentionMode::DoubleFc,
        AttentionMode::PairView2x1,
        AttentionMode::PairView1x1,
        AttentionMode::Folded3x3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Se => "se",
            AttentionMode::DoubleFc => "double-fc",
            AttentionMode::PairView2x1 => "pairview2x1",
            AttentionMode::PairView1x1 => "pairview1x1",
            AttentionMode::Folded3x3 => "folded3x3",
        }
    }

    /// Modes that build an inner-image map from both squeezes.
    pub fn is_inner_imaging(self) -> bool {
        matches!(
            self,
            AttentionMode::PairView2x1 | AttentionMode::PairView1x1 | AttentionMode::Folded3x3
        )
    }

    /// Modes where the identity flow takes part in the excitation.
    pub fn is_competitive(self) -> bool {
        self == AttentionMode::DoubleFc || self.is_inner_imaging()
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "none" => AttentionMode::None,
            "se" => AttentionMode::Se,
            "double-fc" | "doublefc" => AttentionMode::DoubleFc,
            "pairview2x1" | "pairview-2x1" | "2x1" => AttentionMode::PairView2x1,
            "pairview1x1" | "pairview-1x1" | "1x1" => AttentionMode::PairView1x1,
            "folded3x3" | "folded-3x3" | "3x3" => AttentionMode::Folded3x3,
            _ => return Err(Error::Config(format!("unknown attention mode `{s}`"))),
        })
    }
}

/// How the 2×C pair-view map is folded, as a function of C.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldRecipe {
    /// Fixed column count `m`, `n = 2C/m`.
    Cols(usize),
    /// Fixed row count `n`, `m = 2C/n`.
    Rows(usize),
}

impl FoldRecipe {
    /// Resolves `(n, m)` for `channels`. When the recipe does not give a
    /// column count dividing `C`, falls back to the largest divisor of `C`
    /// not above the requested column count.
    pub fn resolve(self, channels: usize) -> Result<(usize, usize)> {
        let c = channels;
        let wanted = match self {
            FoldRecipe::Cols(0) | FoldRecipe::Rows(0) => {
                return Err(Error::Config("fold shape extents must be positive".into()))
            }
            FoldRecipe::Cols(m) => m,
            FoldRecipe::Rows(n) => (2 * c / n).max(1),
        };
        let m = (1..=wanted.min(c))
            .rev()
            .find(|d| c.is_multiple_of(*d))
            .unwrap_or(1);
        Ok((2 * c / m, m))
    }
}

/// Attention settings shared by every block of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    /// Reduction ratio `t`.
    pub reduction: usize,
    pub fold: FoldRecipe,
    /// Overrides the kernel-count rule `ε = round(C / t)`.
    pub kernels: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mode: AttentionMode::None,
            reduction: 16,
            fold: FoldRecipe::Cols(16),
            kernels: None,
        }
    }
}

impl AttentionConfig {
    pub fn new(mode: AttentionMode) -> Self {
        AttentionConfig {
            mode,
            ..Default::default()
        }
    }

    pub fn resolve(&self, channels: usize) -> Result<UnitShape> {
        if self.reduction == 0 {
            return Err(Error::Config("reduction ratio t must be positive".into()));
        }
        if channels == 0 {
            return Err(Error::Config(
                "attention unit needs at least one channel".into(),
            ));
        }
        let kernels = match self.kernels {
            Some(0) => {
                return Err(Error::Config(
                    "pair-view kernel count ε must be positive".into(),
                ))
            }
            Some(k) => k,
            None => kernel_count(channels, self.reduction),
        };
        let fold = match self.mode {
            AttentionMode::Folded3x3 => Some(self.fold.resolve(channels)?),
            AttentionMode::PairView2x1 | AttentionMode::PairView1x1 => Some((2, channels)),
            _ => None,
        };
        Ok(UnitShape {
            mode: self.mode,
            channels,
            hidden: hidden_width(channels, self.reduction),
            kernels,
            fold,
        })
    }
}

/// Width of the excitation bottleneck, `C / t` with a floor of one.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

/// Pair-view kernel count ε: block width over `t`, rounded, at least one.
pub fn kernel_count(channels: usize, reduction: usize) -> usize {
    ((channels as f64 / reduction as f64).round() as usize).max(1)
}

/// Fully resolved geometry of one attention unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitShape {
    pub mode: AttentionMode,
    pub channels: usize,
    pub hidden: usize,
    pub kernels: usize,
    /// Inner-image extents `(rows, cols)` for inner-imaging modes.
    pub fold: Option<(usize, usize)>,
}

impl UnitShape {
    /// Length of the flattened re-imaged signal entering the encoder.
    pub fn encoder_input(&self) -> usize {
        match self.mode {
            AttentionMode::PairView2x1 => self.channels,
            AttentionMode::PairView1x1 | AttentionMode::Folded3x3 => 2 * self.channels,
            AttentionMode::DoubleFc | AttentionMode::Se => self.channels,
            AttentionMode::None => 0,
        }
    }

    pub fn kernel_extent(&self) -> Option<(usize, usize)> {
        match self.mode {
            AttentionMode::PairView2x1 => Some((2, 1)),
            AttentionMode::PairView1x1 => Some((1, 1)),
            AttentionMode::Folded3x3 => Some((3, 3)),
            _ => None,
        }
    }

    /// Trainable scalars of the unit.
    pub fn param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden);
        let fc = Linear::param_count;
        match self.mode {
            AttentionMode::None => 0,
            AttentionMode::Se => fc(c, h, true) + fc(h, c, true),
            AttentionMode::DoubleFc => 2 * fc(c, h, true) + fc(2 * h, c, true),
            AttentionMode::PairView2x1 | AttentionMode::PairView1x1 | AttentionMode::Folded3x3 => {
                let (kh, kw) = self.kernel_extent().unwrap_or((1, 1));
                self.kernels * kh * kw
                    + BatchNorm::param_count(1)
                    + fc(self.encoder_input(), h, true)
                    + fc(h, c, true)
            }
        }
    }
}

/// Which flow a squeezed vector or inner-image row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Residual,
    Identity,
}

/// Per-channel global averages, `[batch, C]`.
#[derive(Clone, Copy, Debug)]
pub struct SqueezedVector {
    pub var: Var,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Two rows: residual squeeze above identity squeeze.
    Stacked { channels: usize },
    /// `rows × cols` with residual/identity rows alternating.
    Folded { rows: usize, cols: usize },
    /// Output of the inner-imaging convolution.
    Reimaged { rows: usize, cols: usize },
}

impl Layout {
    pub fn extents(self) -> (usize, usize) {
        match self {
            Layout::Stacked { channels } => (2, channels),
            Layout::Folded { rows, cols } | Layout::Reimaged { rows, cols } => (rows, cols),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Layout::Stacked { .. } => "stacked",
            Layout::Folded { .. } => "folded",
            Layout::Reimaged { .. } => "reimaged",
        }
    }
}

/// A small single-channel map, `[batch, rows, cols, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct InnerImageMap {
    pub var: Var,
    pub layout: Layout,
}

/// Sigmoid-gated channel weights, `[batch, C]`.
#[derive(Clone, Copy, Debug)]
pub struct ExcitationVector(pub Var);

/// What one attention unit saw during a recorded forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub mode: AttentionMode,
    pub channels: usize,
    pub batch: usize,
    /// `batch × channels`, row-major.
    pub excitation: Vec<f64>,
    /// Inner-image map before the convolution (inner-imaging modes only).
    pub map: Option<MapSnapshot>,
}

#[derive(Clone, Debug)]
pub struct MapSnapshot {
    pub layout: Layout,
    /// `batch × rows × cols`, row-major.
    pub values: Vec<f64>,
}
