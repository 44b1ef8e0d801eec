use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Role of a stored tensor. Decides trainability, weight decay and whether
/// it counts toward the parameter total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel or fully connected weight matrix.
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T> Param<T> {
    pub fn trainable(&self) -> bool {
        self.kind.trainable()
    }
}

/// Flat, ordered storage for every tensor a model owns.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            kind,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Parameters whose names start with `prefix`, i.e. one layer's group.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Param<T>> + 'a {
        self.params
            .iter()
            .filter(move |p| p.name.starts_with(prefix))
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored tensor must be provided.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = tensors.iter().find(|(n, _)| *n == p.name).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing tensor `{}`", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}
