//! A forward/backward session binding a [`Tape`] to a model's [`ParamStore`].

use std::collections::BTreeMap;

use crate::attention::AttentionRecord;
use crate::error::Result;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub struct Graph<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    training: bool,
    leaves: BTreeMap<ParamId, Var>,
    records: Option<Vec<AttentionRecord>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, training: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            training,
            leaves: BTreeMap::new(),
            records: None,
        }
    }

    /// Enables attention recording for this pass.
    pub fn with_recording(mut self) -> Self {
        self.records = Some(Vec::new());
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// The tape variable holding a stored tensor; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable() {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.leaves.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn recording(&self) -> bool {
        self.records.is_some()
    }

    pub fn record(&mut self, r: AttentionRecord) {
        if let Some(rs) = self.records.as_mut() {
            rs.push(r);
        }
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord> {
        self.records.take().unwrap_or_default()
    }

    /// Backpropagates from `root` and stores gradients on every touched trainable parameter.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let mut grads = self.tape.backward(root)?;
        for (&id, &v) in &self.leaves {
            let p = self.store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            p.grad = match grads.take(v) {
                Some(g) => Some(Tensor::new(p.value.shape().to_vec(), g)?),
                None => Some(Tensor::zeros(p.value.shape())),
            };
        }
        Ok(())
    }
}
