use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::{Error, Result};

/// Scale of the uniform initialisation used for every weight matrix,
/// bias and trainable embedding.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        self.add(name, Tensor::uniform(shape, INIT_SCALE, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copy of all tensors keyed by name.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites every parameter from `named`; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = named
                .get(name)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "{name}: expected {:?}, found {:?}",
                        self.values[i].shape(),
                        t.shape()
                    ),
                ));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub(crate) fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    /// Gradient for `id`, or `None` when the parameter did not reach the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other` into `self`, growing to cover all parameters seen.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}
