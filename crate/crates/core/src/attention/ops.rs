use std::rc::Rc;

use crate::attention::fold::fold_index;
use crate::attention::unit::{DoubleFcParams, ExcitationFc};
use crate::attention::{
    AttentionMode, ExcitationVector, InnerImageMap, Layout, Source, SqueezedVector,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::BatchNorm;
use crate::tensor::params::ParamId;
use crate::tensor::tape::Var;
use crate::tensor::Real;

/// Global average pooling of a `[batch, h, w, C]` map.
pub fn squeeze<T: Real>(g: &mut Graph<'_, T>, x: Var, source: Source) -> Result<SqueezedVector> {
    let var = g.tape.global_avg_pool(x)?;
    Ok(SqueezedVector { var, source })
}

fn squeezed_len<T: Real>(g: &Graph<'_, T>, v: &SqueezedVector) -> usize {
    g.value(v.var).shape()[1]
}

/// `s = σ(W₂ · ReLU(W₁ · û + b₁) + b₂)`.
pub fn se_excite<T: Real>(
    g: &mut Graph<'_, T>,
    u_hat: &SqueezedVector,
    p: &ExcitationFc,
) -> Result<ExcitationVector> {
    let h = p.reduce.forward(g, u_hat.var)?;
    let h = g.tape.relu(h)?;
    let z = p.expand.forward(g, h)?;
    Ok(ExcitationVector(g.tape.sigmoid(z)?))
}

/// Separate FC embeddings of both squeezes, concatenated residual-first,
/// then one excitation FC over the joint embedding.
pub fn cmpe_double_fc_excite<T: Real>(
    g: &mut Graph<'_, T>,
    u_hat: &SqueezedVector,
    x_hat: &SqueezedVector,
    p: &DoubleFcParams,
) -> Result<ExcitationVector> {
    let (cu, cx) = (squeezed_len(g, u_hat), squeezed_len(g, x_hat));
    if cu != cx {
        return Err(Error::dim("cmpe_double_fc_excite", "channels", cu, cx));
    }
    let hr = p.reduce_residual.forward(g, u_hat.var)?;
    let hr = g.tape.relu(hr)?;
    let hi = p.reduce_identity.forward(g, x_hat.var)?;
    let hi = g.tape.relu(hi)?;
    let joint = g.tape.concat(hr, hi)?;
    let z = p.excite.forward(g, joint)?;
    Ok(ExcitationVector(g.tape.sigmoid(z)?))
}

/// Stacks the residual squeeze above the identity squeeze as a 2×C map.
pub fn stack_pair_view<T: Real>(
    g: &mut Graph<'_, T>,
    u_hat: &SqueezedVector,
    x_hat: &SqueezedVector,
) -> Result<InnerImageMap> {
    let (cu, cx) = (squeezed_len(g, u_hat), squeezed_len(g, x_hat));
    if cu != cx {
        return Err(Error::dim("stack_pair_view", "channels", cu, cx));
    }
    let batch = g.value(u_hat.var).shape()[0];
    let joint = g.tape.concat(u_hat.var, x_hat.var)?;
    let var = g.tape.reshape(joint, &[batch, 2, cu, 1])?;
    Ok(InnerImageMap {
        var,
        layout: Layout::Stacked { channels: cu },
    })
}

/// Folds a stacked map into `rows × cols` keeping residual/identity rows alternating.
pub fn fold<T: Real>(
    g: &mut Graph<'_, T>,
    map: &InnerImageMap,
    rows: usize,
    cols: usize,
) -> Result<InnerImageMap> {
    let Layout::Stacked { channels } = map.layout else {
        return Err(Error::Config(format!(
            "fold expects a stacked map, got {}",
            map.layout.tag()
        )));
    };
    let index: Rc<[usize]> = fold_index(channels, rows, cols)?.into();
    let var = g.tape.gather(map.var, index, &[rows, cols, 1])?;
    Ok(InnerImageMap {
        var,
        layout: Layout::Folded { rows, cols },
    })
}

/// Convolves `ε` kernels over the map, averages the ε outputs and
/// optionally batch-normalizes the averaged map.
fn scan_and_average<T: Real>(
    g: &mut Graph<'_, T>,
    map: &InnerImageMap,
    kernels: ParamId,
    pad: usize,
    norm: Option<&BatchNorm>,
) -> Result<InnerImageMap> {
    let k = g.param(kernels);
    let conv = g.tape.conv2d(map.var, k, 1, pad)?;
    let mut out = g.tape.channel_mean(conv)?;
    if let Some(bn) = norm {
        out = bn.forward(g, out)?;
    }
    let shape = g.value(out).shape();
    let layout = Layout::Reimaged {
        rows: shape[1],
        cols: shape[2],
    };
    Ok(InnerImageMap { var: out, layout })
}

/// Pair-view convolution over a stacked map with 2×1 or 1×1 kernels
/// (`[kh, kw, 1, ε]`), stride 1, no padding.
pub fn pairview_conv<T: Real>(
    g: &mut Graph<'_, T>,
    map: &InnerImageMap,
    kernels: ParamId,
    norm: Option<&BatchNorm>,
) -> Result<InnerImageMap> {
    if !matches!(map.layout, Layout::Stacked { .. }) {
        return Err(Error::Config(format!(
            "pair-view convolution expects a stacked map, got {}",
            map.layout.tag()
        )));
    }
    let kshape = g.store().value(kernels).shape().to_vec();
    match kshape[..] {
        [2, 1, 1, e] | [1, 1, 1, e] if e > 0 => {}
        _ => {
            return Err(Error::Config(format!(
                "pair-view kernels must be [2,1,1,ε] or [1,1,1,ε], got {kshape:?}"
            )))
        }
    }
    scan_and_average(g, map, kernels, 0, norm)
}

/// 3×3 convolution over a folded map, stride 1 and one pixel of zero
/// padding so the re-imaged map keeps its `n × m` shape.
pub fn folded_conv_3x3<T: Real>(
    g: &mut Graph<'_, T>,
    map: &InnerImageMap,
    kernels: ParamId,
    norm: Option<&BatchNorm>,
) -> Result<InnerImageMap> {
    if !matches!(map.layout, Layout::Folded { .. }) {
        return Err(Error::Config(format!(
            "folded convolution expects a folded map, got {}",
            map.layout.tag()
        )));
    }
    match g.store().value(kernels).shape()[..] {
        [3, 3, 1, e] if e > 0 => {}
        ref s => {
            return Err(Error::Config(format!(
                "folded kernels must be [3,3,1,ε], got {s:?}"
            )))
        }
    }
    scan_and_average(g, map, kernels, 1, norm)
}

/// Flattens a re-imaged map and runs the FC encoder and sigmoid excitation.
pub fn encode_excite_reimaged<T: Real>(
    g: &mut Graph<'_, T>,
    v_c: &InnerImageMap,
    p: &ExcitationFc,
    mode: AttentionMode,
    channels: usize,
) -> Result<ExcitationVector> {
    let expected = match mode {
        AttentionMode::PairView2x1 => channels,
        AttentionMode::PairView1x1 | AttentionMode::Folded3x3 => 2 * channels,
        other => {
            return Err(Error::Config(format!(
                "re-imaged encoding is undefined for mode {other}"
            )))
        }
    };
    let (rows, cols) = v_c.layout.extents();
    if rows * cols != expected {
        return Err(Error::dim(
            "encode_excite_reimaged",
            "flattened length",
            expected,
            rows * cols,
        ));
    }
    let batch = g.value(v_c.var).shape()[0];
    let flat = g.tape.reshape(v_c.var, &[batch, expected])?;
    let h = p.reduce.forward(g, flat)?;
    let h = g.tape.relu(h)?;
    let z = p.expand.forward(g, h)?;
    Ok(ExcitationVector(g.tape.sigmoid(z)?))
}
