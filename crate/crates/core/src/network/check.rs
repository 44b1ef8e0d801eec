use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionMode};
use crate::error::Result;
use crate::network::{BlockKind, BlockSpec, ResidualBlock, Shortcut};
use crate::tensor::gradcheck::{gradcheck_graph, GradcheckReport};
use crate::tensor::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Geometry of the single-block gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCheck {
    pub channels: usize,
    pub reduction: usize,
    pub spatial: usize,
    pub batch: usize,
}

impl Default for BlockCheck {
    fn default() -> Self {
        BlockCheck {
            channels: 8,
            reduction: 4,
            spatial: 4,
            batch: 2,
        }
    }
}

/// Finite-difference check of a full training-mode forward and backward
/// pass through one basic residual block, input gradient included.
pub fn block_gradcheck(
    mode: AttentionMode,
    geometry: BlockCheck,
    seed: u64,
) -> Result<GradcheckReport> {
    let BlockCheck {
        channels: c,
        reduction,
        spatial,
        batch,
    } = geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let attention = AttentionConfig {
        reduction,
        ..AttentionConfig::new(mode)
    }
    .resolve(c)?;
    let spec = BlockSpec {
        kind: BlockKind::Basic,
        in_channels: c,
        out_channels: c,
        stride: 1,
        attention,
        shortcut: Shortcut::Identity,
        stage: 0,
    };
    let block = ResidualBlock::new(&mut store, "block", spec, &mut rng);
    for p in store.iter_mut() {
        if matches!(p.kind, ParamKind::Bias | ParamKind::NormShift) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let shape = [batch, spatial, spatial, c];
    let input = store.add(
        "input",
        ParamKind::Weight,
        Tensor::randn(&shape, 1.0, &mut rng),
    );
    let n = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    gradcheck_graph(&mut store, |g| {
        let x = g.param(input);
        let y = block.forward(g, x)?;
        g.tape.weighted_sum(y, weights.clone())
    })
}
