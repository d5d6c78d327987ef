//! Define-by-run reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its forward value and a closure
//! mapping the output gradient to input gradients. [`Graph::backward`] walks
//! the tape once in reverse.

use crate::error::{FobaError, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Which inputs require a gradient; ops may skip the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// A tape with no parameter store attached.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that collects a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(FobaError::ShapeMismatch(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(BackwardArgs {
                grad: &g,
                out: &node.value,
                inputs,
                needs: needs.clone(),
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Grads {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf node. Intermediate gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter; `None` if it did not take part in the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        let v = self.param_vars.get(id.0).copied().flatten()?;
        self.get(v)
    }
}
