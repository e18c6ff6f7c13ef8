use std::collections::HashMap;

use rand::Rng;

use super::error::AdError;
use super::tape::{NodeId, Tape};

/// Dense n-dimensional array of `f64` values with an optional gradient buffer.
///
/// `values.len()` always equals the product of `shape`; the gradient, when
/// present, has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape/value length mismatch"
        );
        Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], requires_grad)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v], false)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Handle into a [`Params`] registry; stable for the life of the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, name-addressable collection of trainable tensors.
///
/// Insertion order is the canonical order used by binding, the optimizer,
/// and checkpoint serialization, which keeps every run bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct Params {
    items: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId, AdError> {
        if self.by_name.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let id = self.items.len();
        self.by_name.insert(name.to_string(), id);
        self.items.push((name.to_string(), tensor));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.items[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.items[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.items[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId, AdError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.items.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Insert every parameter as a leaf on `tape`; the returned vector is
    /// indexed by [`ParamId`].
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.items
            .iter()
            .map(|(_, t)| tape.leaf(&t.shape, &t.values, t.requires_grad))
            .collect()
    }

    /// Pull gradients accumulated on `tape` back into the parameter tensors.
    pub fn harvest_grads(&mut self, tape: &Tape, binds: &[NodeId]) {
        for (item, &node) in self.items.iter_mut().zip(binds) {
            if !item.1.requires_grad {
                continue;
            }
            if let Some(g) = tape.grad(node) {
                item.1.accumulate_grad(g);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.items.iter_mut() {
            t.grad = None;
        }
    }
}

/// Fan-in-scaled uniform initialization in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}
