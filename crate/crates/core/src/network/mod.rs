//! Pre-activation ResNet and Wide ResNet builders with a configurable
//! attention unit in every residual block.

mod check;
mod count;
mod model;
mod spec;

pub use check::{block_gradcheck, BlockCheck};
pub use count::{block_param_count, param_count, reference_count, ReferenceCount};
pub use model::{Architecture, BlockOutputs, Network, ResidualBlock};
pub use spec::{
    BlockKind, BlockSpec, Family, NetworkSpec, Shortcut, INPUT_CHANNELS, STEM_CHANNELS,
};
