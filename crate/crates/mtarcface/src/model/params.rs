//! Named parameter storage.
//!
//! All trainable tensors live in one flat, ordered set so the optimizer,
//! checkpointing, weight decay, and gradient checking can iterate uniformly.
//! Layers hold indices into the set.

use ndarray::{ArrayD, IxDyn};

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Whether this tensor participates in L2 regularization
    /// (weight matrices yes; biases no).
    pub weight_decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], weight_decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: ArrayD::zeros(IxDyn(shape)),
            weight_decay,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Sum of squared entries of all weight-decay-eligible tensors.
    pub fn squared_weight_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.weight_decay)
            .map(|p| p.value.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Zero-filled gradient (or velocity) buffers matching every parameter.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }
}

/// Per-parameter tensors parallel to a [`ParamSet`] (gradients, velocity).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id]
    }

    /// First parameter holding a non-finite entry, if any.
    pub fn find_non_finite(&self, params: &ParamSet) -> Option<String> {
        for (id, g) in self.tensors.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Some(params.name(id).to_string());
            }
        }
        None
    }
}
