use rand::Rng;

use crate::attention::ops::{
    cmpe_double_fc_excite, encode_excite_reimaged, fold, folded_conv_3x3, pairview_conv, se_excite,
    squeeze, stack_pair_view,
};
use crate::attention::{
    AttentionMode, AttentionRecord, ExcitationVector, InnerImageMap, MapSnapshot, Source, UnitShape,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{BatchNorm, Linear};
use crate::tensor::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::tape::Var;
use crate::tensor::{Real, Tensor};

/// Reduce-then-expand FC pair used by SE and by the re-imaged encoders.
#[derive(Clone, Debug)]
pub struct ExcitationFc {
    pub reduce: Linear,
    pub expand: Linear,
}

#[derive(Clone, Debug)]
pub struct DoubleFcParams {
    pub reduce_residual: Linear,
    pub reduce_identity: Linear,
    /// `[C, 2·C/t]`, residual half first.
    pub excite: Linear,
}

#[derive(Clone, Debug)]
pub struct InnerImagingParams {
    /// `[kh, kw, 1, ε]`
    pub kernels: ParamId,
    pub norm: BatchNorm,
    pub encoder: ExcitationFc,
}

#[derive(Clone, Debug)]
pub enum AttentionParams {
    None,
    Se(ExcitationFc),
    DoubleFc(DoubleFcParams),
    InnerImaging(InnerImagingParams),
}

#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub shape: UnitShape,
    pub params: AttentionParams,
    bypass_norm: bool,
}

impl AttentionUnit {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        shape: UnitShape,
        rng: &mut R,
    ) -> Self {
        let (c, h) = (shape.channels, shape.hidden);
        let params = match shape.mode {
            AttentionMode::None => AttentionParams::None,
            AttentionMode::Se => AttentionParams::Se(ExcitationFc {
                reduce: Linear::new(store, &format!("{prefix}.fc1"), c, h, true, rng),
                expand: Linear::new(store, &format!("{prefix}.fc2"), h, c, true, rng),
            }),
            AttentionMode::DoubleFc => AttentionParams::DoubleFc(DoubleFcParams {
                reduce_residual: Linear::new(
                    store,
                    &format!("{prefix}.fc1_residual"),
                    c,
                    h,
                    true,
                    rng,
                ),
                reduce_identity: Linear::new(
                    store,
                    &format!("{prefix}.fc1_identity"),
                    c,
                    h,
                    true,
                    rng,
                ),
                excite: Linear::new(store, &format!("{prefix}.fc2"), 2 * h, c, true, rng),
            }),
            AttentionMode::PairView2x1 | AttentionMode::PairView1x1 | AttentionMode::Folded3x3 => {
                let (kh, kw) = shape.kernel_extent().unwrap_or((1, 1));
                let std = (2.0 / (kh * kw) as f64).sqrt();
                let kernels = store.add(
                    format!("{prefix}.kernels"),
                    ParamKind::Weight,
                    Tensor::randn(&[kh, kw, 1, shape.kernels], std, rng),
                );
                AttentionParams::InnerImaging(InnerImagingParams {
                    kernels,
                    norm: BatchNorm::new(store, &format!("{prefix}.bn"), 1),
                    encoder: ExcitationFc {
                        reduce: Linear::new(
                            store,
                            &format!("{prefix}.fc1"),
                            shape.encoder_input(),
                            h,
                            true,
                            rng,
                        ),
                        expand: Linear::new(store, &format!("{prefix}.fc2"), h, c, true, rng),
                    },
                })
            }
        };
        AttentionUnit {
            shape,
            params,
            bypass_norm: false,
        }
    }

    pub fn mode(&self) -> AttentionMode {
        self.shape.mode
    }

    /// Skips the batch norm after the inner-imaging convolution.
    pub fn set_bypass_norm(&mut self, bypass: bool) {
        self.bypass_norm = bypass;
    }

    /// Excitation for one block, or `None` when the mode applies no scaling.
    pub fn excite<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x_id: Var,
        u_r: Var,
    ) -> Result<Option<ExcitationVector>> {
        let (s, snapshot) = match &self.params {
            AttentionParams::None => return Ok(None),
            AttentionParams::Se(p) => {
                let u_hat = squeeze(g, u_r, Source::Residual)?;
                (se_excite(g, &u_hat, p)?, None)
            }
            AttentionParams::DoubleFc(p) => {
                let u_hat = squeeze(g, u_r, Source::Residual)?;
                let x_hat = squeeze(g, x_id, Source::Identity)?;
                (cmpe_double_fc_excite(g, &u_hat, &x_hat, p)?, None)
            }
            AttentionParams::InnerImaging(p) => {
                let u_hat = squeeze(g, u_r, Source::Residual)?;
                let x_hat = squeeze(g, x_id, Source::Identity)?;
                let stacked = stack_pair_view(g, &u_hat, &x_hat)?;
                let norm = (!self.bypass_norm).then_some(&p.norm);
                let (before, v_c) = match self.shape.mode {
                    AttentionMode::Folded3x3 => {
                        let (n, m) = self.shape.fold.ok_or_else(|| {
                            Error::Config("folded mode without a fold shape".into())
                        })?;
                        let folded = fold(g, &stacked, n, m)?;
                        let v_c = folded_conv_3x3(g, &folded, p.kernels, norm)?;
                        (folded, v_c)
                    }
                    _ => {
                        let v_c = pairview_conv(g, &stacked, p.kernels, norm)?;
                        (stacked, v_c)
                    }
                };
                let s = encode_excite_reimaged(
                    g,
                    &v_c,
                    &p.encoder,
                    self.shape.mode,
                    self.shape.channels,
                )?;
                (s, Some(before))
            }
        };
        if g.recording() {
            let record = self.snapshot(g, s, snapshot.as_ref());
            g.record(record);
        }
        Ok(Some(s))
    }

    fn snapshot<T: Real>(
        &self,
        g: &Graph<'_, T>,
        s: ExcitationVector,
        map: Option<&InnerImageMap>,
    ) -> AttentionRecord {
        let sv = g.value(s.0);
        AttentionRecord {
            mode: self.shape.mode,
            channels: self.shape.channels,
            batch: sv.shape()[0],
            excitation: sv.data().iter().map(|v| v.as_f64()).collect(),
            map: map.map(|m| MapSnapshot {
                layout: m.layout,
                values: g.value(m.var).data().iter().map(|v| v.as_f64()).collect(),
            }),
        }
    }

    /// `y = s ⊙ u_r + x_id`, or `u_r + x_id` for mode `none`.
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x_id: Var, u_r: Var) -> Result<Var> {
        let (xs, us) = (g.value(x_id).shape(), g.value(u_r).shape());
        if xs != us {
            const AXES: [&str; 4] = ["batch", "height", "width", "channels"];
            let axis = xs.iter().zip(us).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::dim(
                "cmpe_se_apply",
                AXES[axis.min(3)],
                us[axis],
                xs[axis],
            ));
        }
        if us[3] != self.shape.channels {
            return Err(Error::dim(
                "cmpe_se_apply",
                "channels",
                self.shape.channels,
                us[3],
            ));
        }
        let scaled = match self.excite(g, x_id, u_r)? {
            Some(s) => g.tape.channel_scale(s.0, u_r)?,
            None => u_r,
        };
        g.tape.add(scaled, x_id)
    }
}
