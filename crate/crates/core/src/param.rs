//! Named parameters with frozen flags and optimizer state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Adam moment buffers and step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
    pub state: AdamState,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.len();
        Self {
            name: name.into(),
            tensor,
            grad: None,
            frozen: false,
            state: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }

    /// Layer-norm gain or bias.
    pub fn is_norm(&self) -> bool {
        self.name.ends_with(".gamma") || self.name.ends_with(".beta")
    }
}

/// Insertion-ordered parameter registry with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        self.push(Parameter::new(name, tensor))
    }

    pub fn push(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::DuplicateParam(param.name));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    /// Matrix initialized from Normal(0, std).
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(rng.normal() * std)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, T::of_f64(value)))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.numel()).sum()
    }

    /// Copy with every tensor converted; grads and optimizer state are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let mut q = Parameter::new(p.name.clone(), p.tensor.cast::<U>());
            q.frozen = p.frozen;
            out.push(q).expect("names already unique");
        }
        out
    }

    /// Adds gradients into the per-parameter grad slots.
    pub fn accumulate_grads(&mut self, grads: impl IntoIterator<Item = (ParamId, Tensor<T>)>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Gives every trainable parameter without a gradient an all-zero one.
    pub fn fill_missing_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| !p.frozen && p.grad.is_none()) {
            p.grad = Some(Tensor::zeros(p.tensor.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
