//! Competitive squeeze-and-excitation residual networks on a small
//! reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up: [`tensor`] holds the dense tensor
//! type, kernels, the tape and weight files; [`attention`] builds the
//! excitation units; [`network`] assembles them into ResNets and WRNs;
//! [`data`], [`train`] and [`diagnostics`] cover the rest of the workflow.

pub mod attention;
pub mod data;
pub mod diagnostics;
mod error;
pub mod graph;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod train;

pub use attention::{
    AttentionConfig, AttentionMode, AttentionRecord, AttentionUnit, FoldRecipe, UnitShape,
};
pub use data::{Dataset, RawDataset, SynthManifest};
pub use diagnostics::{capture_trace, stats, AttentionStats, AttentionTrace};
pub use error::{Error, Result};
pub use graph::Graph;
pub use network::{param_count, BlockKind, Family, Network, NetworkSpec};
pub use tensor::checkpoint::WeightFile;
pub use tensor::params::{ParamId, ParamKind, ParamStore};
pub use tensor::tape::{Tape, Var};
pub use tensor::{Precision, Real, Tensor};
pub use train::{EpochMetrics, TrainConfig, Trainer};
