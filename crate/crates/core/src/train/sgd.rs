use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

/// Momentum buffers, one per stored tensor (empty for non-trainable ones).
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity<T> {
    pub buffers: Vec<Vec<T>>,
}

impl<T: Real> Velocity<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        Velocity {
            buffers: store
                .iter()
                .map(|p| {
                    if p.trainable() {
                        vec![T::zero(); p.value.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }
}

/// One update of every trainable tensor from its stored gradient.
///
/// With `g' = g + wd·w` (decay on weights only):
/// `v ← μv − lr·g'`, then `w ← w + μv − lr·g'` (Nesterov) or `w ← w + v`.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    velocity: &mut Velocity<T>,
    hp: &SgdParams,
) -> Result<()> {
    for p in store.iter() {
        if !p.trainable() {
            continue;
        }
        if let Some(g) = &p.grad {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    let (lr, mu) = (T::of(hp.lr), T::of(hp.momentum));
    for (p, v) in store.iter_mut().zip(&mut velocity.buffers) {
        if !p.trainable() {
            continue;
        }
        let Some(g) = &p.grad else { continue };
        let wd = if p.kind.decays() {
            T::of(hp.weight_decay)
        } else {
            T::zero()
        };
        for ((w, &g), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.iter_mut())
        {
            let step = lr * (g + wd * *w);
            *v = mu * *v - step;
            *w = if hp.nesterov {
                *w + mu * *v - step
            } else {
                *w + *v
            };
        }
    }
    Ok(())
}
