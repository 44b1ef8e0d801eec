use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionMode, FoldRecipe, UnitShape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "preact-resnet")]
    PreactResnet,
    #[serde(rename = "wrn")]
    Wrn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// 1×1 convolution with the block's stride.
    Projection,
}

/// One residual block of the stage plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub attention: UnitShape,
    pub shortcut: Shortcut,
    pub stage: usize,
}

impl BlockSpec {
    /// Width of the inner 3×3 convolution of a bottleneck block.
    pub fn bottleneck_width(&self) -> usize {
        self.out_channels / 4
    }
}

pub const STEM_CHANNELS: usize = 16;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecFile", into = "SpecFile")]
pub struct NetworkSpec {
    pub family: Family,
    pub depth: usize,
    /// Width multiplier `k` (wide ResNets; 1 for pre-act ResNets).
    pub widen_factor: usize,
    pub block: BlockKind,
    pub num_classes: usize,
    /// Square input extent; inputs are `[batch, size, size, 3]`.
    pub input_size: usize,
    pub attention: AttentionConfig,
}

impl NetworkSpec {
    /// Pre-activation ResNet; depths of 164 and above use bottleneck blocks.
    pub fn preact_resnet(depth: usize, mode: AttentionMode) -> Self {
        let block = if depth >= 164 {
            BlockKind::Bottleneck
        } else {
            BlockKind::Basic
        };
        NetworkSpec {
            family: Family::PreactResnet,
            depth,
            widen_factor: 1,
            block,
            num_classes: 10,
            input_size: 32,
            attention: AttentionConfig {
                fold: default_fold(Family::PreactResnet),
                ..AttentionConfig::new(mode)
            },
        }
    }

    pub fn wrn(depth: usize, widen_factor: usize, mode: AttentionMode) -> Self {
        NetworkSpec {
            family: Family::Wrn,
            depth,
            widen_factor,
            block: BlockKind::Basic,
            num_classes: 10,
            input_size: 32,
            attention: AttentionConfig {
                fold: default_fold(Family::Wrn),
                ..AttentionConfig::new(mode)
            },
        }
    }

    pub fn with_block(mut self, block: BlockKind) -> Self {
        self.block = block;
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_reduction(mut self, t: usize) -> Self {
        self.attention.reduction = t;
        self
    }

    /// Blocks per stage, checking the depth formula for the family.
    pub fn blocks_per_stage(&self) -> Result<usize> {
        let (per_block, offset, formula) = match (self.family, self.block) {
            (Family::Wrn, BlockKind::Basic) => (6, 4, "6u+4"),
            (Family::Wrn, BlockKind::Bottleneck) => {
                return Err(Error::Config("wide ResNets use basic blocks".into()))
            }
            (Family::PreactResnet, BlockKind::Basic) => (6, 2, "6u+2"),
            (Family::PreactResnet, BlockKind::Bottleneck) => (9, 2, "9u+2"),
        };
        if self.depth <= offset || !(self.depth - offset).is_multiple_of(per_block) {
            return Err(Error::Config(format!(
                "depth {} is not of the form {formula} for {:?} with {:?} blocks",
                self.depth, self.family, self.block
            )));
        }
        Ok((self.depth - offset) / per_block)
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        if self.widen_factor == 0 {
            return Err(Error::Config("widen_factor must be positive".into()));
        }
        if self.family == Family::PreactResnet && self.widen_factor != 1 {
            return Err(Error::Config("widen_factor applies to wrn only".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_size < 4 {
            return Err(Error::Config("input_size must be at least 4".into()));
        }
        if self.attention.reduction == 0 {
            return Err(Error::Config("attention.t must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of each of the three stages.
    pub fn stage_widths(&self) -> [usize; 3] {
        let base = [16, 32, 64];
        match (self.family, self.block) {
            (Family::Wrn, _) => base.map(|w| w * self.widen_factor),
            (Family::PreactResnet, BlockKind::Bottleneck) => base.map(|w| w * 4),
            (Family::PreactResnet, BlockKind::Basic) => base,
        }
    }

    /// The ordered residual blocks of the network.
    pub fn block_plan(&self) -> Result<Vec<BlockSpec>> {
        self.validate()?;
        let u = self.blocks_per_stage()?;
        let mut plan = Vec::with_capacity(3 * u);
        let mut in_c = STEM_CHANNELS;
        for (stage, &out_c) in self.stage_widths().iter().enumerate() {
            for b in 0..u {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let shortcut = if in_c != out_c || stride != 1 {
                    Shortcut::Projection
                } else {
                    Shortcut::Identity
                };
                plan.push(BlockSpec {
                    kind: self.block,
                    in_channels: in_c,
                    out_channels: out_c,
                    stride,
                    attention: self.attention.resolve(out_c)?,
                    shortcut,
                    stage,
                });
                in_c = out_c;
            }
        }
        Ok(plan)
    }

    pub fn final_channels(&self) -> usize {
        self.stage_widths()[2]
    }

    /// Conventional model name, e.g. `WRN-28-10` or `ResNet-164`.
    pub fn name(&self) -> String {
        match self.family {
            Family::Wrn => format!("WRN-{}-{}", self.depth, self.widen_factor),
            Family::PreactResnet => format!("ResNet-{}", self.depth),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    /// Stable 64-bit digest of the canonical serialized form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

fn default_fold(family: Family) -> FoldRecipe {
    match family {
        Family::PreactResnet => FoldRecipe::Cols(16),
        Family::Wrn => FoldRecipe::Rows(20),
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct SpecFile {
    family: Family,
    depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    widen_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block: Option<BlockKind>,
    #[serde(default = "default_classes")]
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_size: Option<usize>,
    #[serde(default)]
    attention: AttentionFile,
}

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionFile {
    #[serde(default)]
    mode: AttentionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold_m: Option<usize>,
}

fn default_classes() -> usize {
    10
}

impl TryFrom<SpecFile> for NetworkSpec {
    type Error = Error;

    fn try_from(file: SpecFile) -> Result<Self> {
        file.into_spec()
    }
}

impl From<NetworkSpec> for SpecFile {
    fn from(spec: NetworkSpec) -> Self {
        SpecFile::from_spec(&spec)
    }
}

impl SpecFile {
    fn into_spec(self) -> Result<NetworkSpec> {
        let mut spec = match self.family {
            Family::Wrn => NetworkSpec::wrn(
                self.depth,
                self.widen_factor.unwrap_or(1),
                self.attention.mode,
            ),
            Family::PreactResnet => {
                let mut s = NetworkSpec::preact_resnet(self.depth, self.attention.mode);
                if let Some(k) = self.widen_factor {
                    s.widen_factor = k;
                }
                s
            }
        };
        if let Some(b) = self.block {
            spec.block = b;
        }
        spec.num_classes = self.num_classes;
        if let Some(s) = self.input_size {
            spec.input_size = s;
        }
        if let Some(t) = self.attention.t {
            spec.attention.reduction = t;
        }
        spec.attention.fold =
            match (self.attention.fold_n, self.attention.fold_m) {
                (Some(_), Some(_)) => return Err(Error::Config(
                    "set attention.fold_n or attention.fold_m, not both; the other follows from 2C"
                        .into(),
                )),
                (Some(n), None) => FoldRecipe::Rows(n),
                (None, Some(m)) => FoldRecipe::Cols(m),
                (None, None) => spec.attention.fold,
            };
        spec.validate()?;
        Ok(spec)
    }

    /// Fields equal to the family defaults are omitted so that configs
    /// layered over a preset only carry what they change.
    fn from_spec(spec: &NetworkSpec) -> Self {
        let defaults = match spec.family {
            Family::Wrn => NetworkSpec::wrn(spec.depth, spec.widen_factor, spec.attention.mode),
            Family::PreactResnet => NetworkSpec::preact_resnet(spec.depth, spec.attention.mode),
        };
        let (fold_n, fold_m) = match spec.attention.fold {
            f if f == defaults.attention.fold => (None, None),
            FoldRecipe::Rows(n) => (Some(n), None),
            FoldRecipe::Cols(m) => (None, Some(m)),
        };
        SpecFile {
            family: spec.family,
            depth: spec.depth,
            widen_factor: (spec.family == Family::Wrn || spec.widen_factor != 1)
                .then_some(spec.widen_factor),
            block: (spec.block != defaults.block).then_some(spec.block),
            num_classes: spec.num_classes,
            input_size: (spec.input_size != defaults.input_size).then_some(spec.input_size),
            attention: AttentionFile {
                mode: spec.attention.mode,
                t: Some(spec.attention.reduction),
                fold_n,
                fold_m,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrn_16_8_plan() {
        let plan = NetworkSpec::wrn(16, 8, AttentionMode::None)
            .block_plan()
            .unwrap();
        assert_eq!(plan.len(), 6);
        let widths: Vec<_> = plan.iter().map(|b| b.out_channels).collect();
        assert_eq!(widths, vec![128, 128, 256, 256, 512, 512]);
        assert_eq!(plan[0].shortcut, Shortcut::Projection);
        assert_eq!(plan[1].shortcut, Shortcut::Identity);
        assert_eq!(plan[2].stride, 2);
    }

    #[test]
    fn resnet_164_has_54_bottlenecks() {
        let spec = NetworkSpec::preact_resnet(164, AttentionMode::None);
        let plan = spec.block_plan().unwrap();
        assert_eq!(plan.len(), 54);
        assert!(plan.iter().all(|b| b.kind == BlockKind::Bottleneck));
        assert_eq!(plan[0].bottleneck_width(), 16);
    }

    #[test]
    fn block_counts_match_reference_networks() {
        let count = |s: NetworkSpec| s.block_plan().unwrap().len();
        assert_eq!(count(NetworkSpec::wrn(28, 10, AttentionMode::Se)), 12);
        assert_eq!(count(NetworkSpec::wrn(22, 10, AttentionMode::Se)), 9);
        assert_eq!(count(NetworkSpec::wrn(16, 8, AttentionMode::Se)), 6);
        assert_eq!(
            count(NetworkSpec::preact_resnet(164, AttentionMode::Se)),
            54
        );
        assert_eq!(
            count(NetworkSpec::preact_resnet(110, AttentionMode::Se)),
            54
        );
    }

    #[test]
    fn bad_wrn_depth_names_constraint() {
        let err = NetworkSpec::wrn(17, 1, AttentionMode::None)
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("6u+4"), "{err}");
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let text = r#"
            family = "wrn"
            depth = 28
            widen_factor = 10
            num_classes = 100
            [attention]
            mode = "folded3x3"
            t = 16
            fold_n = 20
        "#;
        let spec = NetworkSpec::from_toml(text).unwrap();
        assert_eq!(spec.attention.fold, FoldRecipe::Rows(20));
        assert_eq!(spec.num_classes, 100);
        assert_eq!(NetworkSpec::from_toml(&spec.to_toml()).unwrap(), spec);

        let bad = text.replace("t = 16", "t = 16\nratio = 3");
        assert!(NetworkSpec::from_toml(&bad).is_err());
        let bad = text.replace("depth = 28", "depth = 28\ncolor = 1");
        assert!(NetworkSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = NetworkSpec::wrn(16, 8, AttentionMode::Se);
        let b = NetworkSpec::wrn(16, 8, AttentionMode::DoubleFc);
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
