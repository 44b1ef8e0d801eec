//! Parameterised layers: each owns ids into a [`ParamStore`] and knows how
//! to emit itself onto a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::tape::{NormStats, Var};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Bias-free convolution, kernel `[kh, kw, in, out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: (usize, usize),
        in_c: usize,
        out_c: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let shape = [kernel.0, kernel.1, in_c, out_c];
        let std = he_std(kernel.0 * kernel.1 * in_c);
        let kernel = store.add(name, ParamKind::Weight, Tensor::randn(&shape, std, rng));
        Conv2d {
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        g.tape.conv2d(x, k, self.stride, self.pad)
    }
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::randn(&[out_f, in_f], he_std(in_f), rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[out_f]),
            )
        });
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }

    pub fn param_count(in_f: usize, out_f: usize, bias: bool) -> usize {
        in_f * out_f + if bias { out_f } else { 0 }
    }
}

/// Batch normalization over the channel (last) axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let c = [channels];
        BatchNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::NormScale,
                Tensor::full(&c, T::one()),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamKind::NormShift,
                Tensor::zeros(&c),
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(&c),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::full(&c, T::one()),
            ),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        if g.training() {
            let rows = g.value(x).len() / g.value(x).shape().last().copied().unwrap_or(1);
            let (y, stats) = g
                .tape
                .batch_norm(x, gamma, beta, NormStats::Batch { eps: BN_EPS })?;
            if let Some((mean, var)) = stats {
                let m = T::of(BN_MOMENTUM);
                let unbias = if rows > 1 {
                    T::of(rows as f64 / (rows - 1) as f64)
                } else {
                    T::one()
                };
                let store = g.store_mut();
                for (r, b) in store
                    .get_mut(self.running_mean)
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(&mean)
                {
                    *r = m * *r + (T::one() - m) * *b;
                }
                for (r, b) in store
                    .get_mut(self.running_var)
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(&var)
                {
                    *r = m * *r + (T::one() - m) * *b * unbias;
                }
            }
            Ok(y)
        } else {
            let store = g.store();
            let mean = store.value(self.running_mean).data().to_vec();
            let var = store.value(self.running_var).data().to_vec();
            let (y, _) = g.tape.batch_norm(
                x,
                gamma,
                beta,
                NormStats::Fixed {
                    mean: &mean,
                    var: &var,
                    eps: BN_EPS,
                },
            )?;
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_before_training_uses_init_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut g = Graph::new(&mut store, false);
        let x = g.input(Tensor::new(vec![1, 1, 1, 2], vec![3.0, -1.0]).unwrap());
        let y = bn.forward(&mut g, x).unwrap();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((g.value(y).data()[0] - 3.0 * expect).abs() < 1e-12);
        assert!((g.value(y).data()[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn training_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        {
            let mut g = Graph::new(&mut store, true);
            let x = g.input(Tensor::new(vec![2, 1, 1, 1], vec![4.0, 6.0]).unwrap());
            bn.forward(&mut g, x).unwrap();
        }
        let mean = store.value(bn.running_mean).data()[0];
        let var = store.value(bn.running_var).data()[0];
        assert!((mean - 0.1 * 5.0).abs() < 1e-12);
        // unbiased batch variance of {4, 6} is 2
        assert!((var - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn affine_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        for id in [bn.gamma, bn.beta] {
            store.get_mut(id).value = Tensor::randn(&[3], 1.0, &mut rng);
        }
        let x = Tensor::randn(&[2, 2, 2, 3], 2.0, &mut rng);
        let proj: Vec<f64> = Tensor::<f64>::randn(&[24], 1.0, &mut rng).into_data();
        let report = gradcheck_graph(&mut store, |g| {
            let xv = g.input(x.clone());
            let y = bn.forward(g, xv)?;
            g.tape.weighted_sum(y, proj.clone())
        })
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
