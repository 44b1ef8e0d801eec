use crate::attention::AttentionMode;
use crate::error::Result;
use crate::layers::{BatchNorm, Linear};
use crate::network::spec::{
    BlockKind, BlockSpec, NetworkSpec, Shortcut, INPUT_CHANNELS, STEM_CHANNELS,
};

fn conv(kh: usize, kw: usize, cin: usize, cout: usize) -> usize {
    kh * kw * cin * cout
}

pub fn block_param_count(b: &BlockSpec) -> usize {
    let (cin, cout) = (b.in_channels, b.out_channels);
    let branch = match b.kind {
        BlockKind::Basic => {
            BatchNorm::param_count(cin)
                + conv(3, 3, cin, cout)
                + BatchNorm::param_count(cout)
                + conv(3, 3, cout, cout)
        }
        BlockKind::Bottleneck => {
            let mid = b.bottleneck_width();
            BatchNorm::param_count(cin)
                + conv(1, 1, cin, mid)
                + BatchNorm::param_count(mid)
                + conv(3, 3, mid, mid)
                + BatchNorm::param_count(mid)
                + conv(1, 1, mid, cout)
        }
    };
    let shortcut = match b.shortcut {
        Shortcut::Identity => 0,
        Shortcut::Projection => conv(1, 1, cin, cout),
    };
    branch + shortcut + b.attention.param_count()
}

/// Trainable scalars of the network described by `spec`, computed from
/// the block plan without allocating any weights.
pub fn param_count(spec: &NetworkSpec) -> Result<usize> {
    let plan = spec.block_plan()?;
    let c = spec.final_channels();
    let stem = conv(3, 3, INPUT_CHANNELS, STEM_CHANNELS);
    let blocks: usize = plan.iter().map(block_param_count).sum();
    Ok(stem + blocks + BatchNorm::param_count(c) + Linear::param_count(c, spec.num_classes, true))
}

/// A published model size, in millions of parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCount {
    pub millions: f64,
    pub source: &'static str,
}

impl ReferenceCount {
    /// Signed relative deviation of `count` from the reference.
    pub fn deviation(&self, count: usize) -> f64 {
        count as f64 / (self.millions * 1e6) - 1.0
    }
}

/// Published sizes for the CIFAR-10 reference networks.
pub fn reference_count(spec: &NetworkSpec) -> Option<ReferenceCount> {
    use AttentionMode::*;
    if spec.num_classes != 10 || spec.input_size != 32 || spec.attention.reduction != 16 {
        return Option::None;
    }
    let resnet = "published CIFAR-10 ResNet-164 size";
    let wrn = "published CIFAR-10 WRN-28-10 size";
    let (millions, source) = match (spec.name().as_str(), spec.block, spec.attention.mode) {
        ("ResNet-164", BlockKind::Bottleneck, m) => (
            match m {
                None => 1.70,
                Se => 1.95,
                DoubleFc => 2.12,
                PairView2x1 => 1.95,
                PairView1x1 => 2.04,
                Folded3x3 => 1.99,
            },
            resnet,
        ),
        ("WRN-28-10", BlockKind::Basic, m) => (
            match m {
                None => 36.5,
                Se => 36.8,
                DoubleFc => 37.04,
                PairView2x1 => 36.8,
                PairView1x1 => 36.92,
                Folded3x3 => 36.90,
            },
            wrn,
        ),
        _ => return Option::None,
    };
    Some(ReferenceCount { millions, source })
}
