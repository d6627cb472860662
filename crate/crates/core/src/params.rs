//! Binds named weights into a [`Graph`].

use std::cell::RefCell;

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Lazily turns parameters into graph leaves, one leaf per name.
///
/// Asking twice for the same name returns the same node, so a module applied
/// to several inputs (the feature encoder on both frames, the GRU on every
/// iteration) shares one set of leaves and accumulates their gradients.
pub struct ParamScope<'g, 'w> {
    graph: &'g Graph,
    weights: &'w ModelWeights,
    trainable: bool,
    bound: RefCell<IndexMap<String, Var<'g>>>,
}

impl<'g, 'w> ParamScope<'g, 'w> {
    /// Parameters enter as gradient-carrying variables.
    pub fn trainable(graph: &'g Graph, weights: &'w ModelWeights) -> Self {
        Self::new(graph, weights, true)
    }

    /// Parameters enter as constants.
    pub fn frozen(graph: &'g Graph, weights: &'w ModelWeights) -> Self {
        Self::new(graph, weights, false)
    }

    fn new(graph: &'g Graph, weights: &'w ModelWeights, trainable: bool) -> Self {
        Self {
            graph,
            weights,
            trainable,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.weights.get(name)?.clone();
        let v = if self.trainable {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Weight and bias of the layer `prefix`.
    pub fn layer(&self, prefix: &str) -> Result<(Var<'g>, Var<'g>)> {
        Ok((self.get(&format!("{prefix}.w"))?, self.get(&format!("{prefix}.b"))?))
    }

    pub fn conv(&self, prefix: &str, x: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (w, b) = self.layer(prefix)?;
        x.conv2d(w, b, stride, pad)
    }

    /// Names bound so far, in first-use order.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Per-parameter gradients; parameters that were bound but not reached get zeros.
    pub fn gradients(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}
