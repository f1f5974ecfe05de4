//! Trainable-parameter registry shared by the attention modules and heads.
//!
//! Every trainable tensor is registered exactly once; the optimizer walks
//! the registry by index and checkpoints serialize it in the same order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    /// Fusion weight, clamped to [0, 1] after every optimizer update.
    FusionWeight,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
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

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.params.push(Param { name: name.into(), value, kind });
        ParamId(self.params.len() - 1)
    }

    /// Uniform fan-in initialization: bound = 1/sqrt(fan_in), biases zero.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<T> = (0..dims.iter().product())
            .map(|_| T::of_f64(rng.random_range(-bound..bound)))
            .collect();
        self.register(name, Tensor::from_vec(dims, data).expect("init shape"), ParamKind::Dense)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total trainable element count.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value = s.clone();
        }
    }
}

/// Leaf nodes for every registered parameter on one graph, index-aligned
/// with the registry.
pub struct GraphBinding {
    nodes: Vec<NodeId>,
}

impl GraphBinding {
    pub fn bind_all<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Self> {
        Self::bind_with(g, store, &[])
    }

    /// Binds every parameter, substituting the given nodes for specific
    /// parameters (used to differentiate with respect to one of them).
    pub fn bind_with<T: Real>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        overrides: &[(ParamId, NodeId)],
    ) -> Result<Self> {
        let mut nodes = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            match overrides.iter().find(|(o, _)| *o == id) {
                Some(&(_, n)) => nodes.push(n),
                None => nodes.push(g.leaf(p.value.clone(), true)?),
            }
        }
        Ok(GraphBinding { nodes })
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradients for every parameter, registry order; zeros for parameters
    /// the loss never touched.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Result<Vec<Tensor<T>>> {
        self.nodes.iter().map(|&n| g.grad(n)).collect()
    }
}
