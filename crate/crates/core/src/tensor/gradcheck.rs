//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::params::ParamStore;
use crate::tensor::tape::Var;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst: Option<String>,
    pub tensors: Vec<TensorReport>,
    /// Set when a loss or gradient was non-finite; names the tensor.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tolerance
    }
}

/// Compares analytic gradients against central differences for every
/// trainable scalar in `store`.
///
/// `eval(store, with_grad)` must return the scalar loss and, when
/// `with_grad` is set, leave `grad` populated on each trainable parameter.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, mut eval: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    let mut report = GradcheckReport::default();
    store.zero_grads();
    let base = eval(store, true)?;
    if !base.is_finite() {
        report.failure = Some("loss".into());
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }
    let analytic: Vec<Option<Vec<f64>>> = store
        .iter()
        .map(|p| {
            p.trainable().then(|| {
                p.grad
                    .as_ref()
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
        })
        .collect();

    let ids: Vec<_> = store.ids().collect();
    for (id, grads) in ids.into_iter().zip(analytic) {
        let Some(grads) = grads else { continue };
        let name = store.get(id).name.clone();
        if grads.iter().any(|g| !g.is_finite()) {
            report.failure = Some(name);
            report.max_rel_error = f64::INFINITY;
            return Ok(report);
        }
        let mut worst = 0.0f64;
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = eval(store, false);
            store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = eval(store, false);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => {
                    report.failure = Some(name);
                    report.max_rel_error = f64::INFINITY;
                    return Ok(report);
                }
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
        if worst > report.max_rel_error {
            report.max_rel_error = worst;
            report.worst = Some(name.clone());
        }
        report.tensors.push(TensorReport {
            name,
            checked: grads.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// [`gradcheck`] for a loss built on a [`Graph`] in training mode.
pub fn gradcheck_graph<B>(store: &mut ParamStore<f64>, mut build: B) -> Result<GradcheckReport>
where
    B: FnMut(&mut Graph<'_, f64>) -> Result<Var>,
{
    gradcheck(store, |s, with_grad| {
        let mut g = Graph::new(s, true);
        let loss = build(&mut g)?;
        let value = g.value(loss).data()[0];
        if with_grad {
            g.backward(loss)?;
        }
        Ok(value)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParamKind;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "fc.weight",
            ParamKind::Weight,
            Tensor::randn(&[4, 8], 0.5, rng),
        );
        s.add("fc.bias", ParamKind::Bias, Tensor::randn(&[4], 0.5, rng));
        s
    }

    fn linear_loss(g: &mut Graph<'_, f64>, x: &Tensor<f64>, proj: &[f64]) -> Result<Var> {
        let w = g.param(g.store().find("fc.weight").unwrap());
        let b = g.param(g.store().find("fc.bias").unwrap());
        let xv = g.input(x.clone());
        let y = g.tape.linear(xv, w, Some(b))?;
        g.tape.weighted_sum(y, proj.to_vec())
    }

    #[test]
    fn linear_graph_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = linear_store(&mut rng);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let proj: Vec<f64> = Tensor::<f64>::randn(&[12], 1.0, &mut rng).into_data();
        let report = gradcheck_graph(&mut store, |g| linear_loss(g, &x, &proj)).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.tensors.len(), 2);
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = linear_store(&mut rng);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let proj: Vec<f64> = Tensor::<f64>::randn(&[12], 1.0, &mut rng).into_data();
        let report = gradcheck(&mut store, |s, with_grad| {
            let mut g = Graph::new(s, true);
            let loss = linear_loss(&mut g, &x, &proj)?;
            let v = g.value(loss).data()[0];
            if with_grad {
                g.backward(loss)?;
                // fixture: a backward pass that is off by 10%
                for p in g.store_mut().iter_mut() {
                    if let Some(grad) = p.grad.as_mut() {
                        grad.data_mut().iter_mut().for_each(|v| *v *= 1.1);
                    }
                }
            }
            Ok(v)
        })
        .unwrap();
        assert!(!report.passed(1e-4));
        assert!(report.max_rel_error > 0.05);
    }

    #[test]
    fn non_finite_loss_names_tensor() {
        let mut store = ParamStore::new();
        store.add("p", ParamKind::Weight, Tensor::scalar(1.0));
        let report = gradcheck(&mut store, |s, with_grad| {
            let v = s.value(s.find("p").unwrap()).data()[0];
            if with_grad {
                let id = s.find("p").unwrap();
                s.get_mut(id).grad = Some(Tensor::scalar(f64::NAN));
            }
            Ok(v)
        })
        .unwrap();
        assert_eq!(report.failure.as_deref(), Some("p"));
    }
}
