//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! recorded node stores its value, its parent nodes and a closure that maps
//! the gradient of the node to gradients of its parents. [`Graph::backward`]
//! replays the tape in reverse from a scalar root.
//!
//! Node values never change once recorded. Separate graphs share nothing,
//! so independent samples can be differentiated on separate threads.

mod check;
mod conv;
mod norm;
mod ops;
mod resample;

use std::collections::{BTreeMap, HashMap};

pub use check::{check_directional, check_gradients, check_sampled, GradReport};
pub use norm::NORM_EPS;
pub use ops::{BinaryOp, UnaryOp};
pub use resample::resample_matrix;
pub use conv::{Conv3dSpec, Padding};
pub use resample::ResampleMode;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per parent.
/// Arguments: output gradient, parent values, output value.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Distance from a kink below which a value counts as lying on it. Roundoff
/// alone can move such values to either side.
pub const KINK_ZONE: f64 = 1e-9;

/// Named parameter tensors, sorted by name.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    branches: Vec<i8>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a value whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds the named parameter from `params` as a leaf, once per graph.
    pub fn param(&mut self, params: &ParamMap, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::arg(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to an existing node, so later [`Graph::param`] calls for
    /// that name return `v` instead of reading a parameter map.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Which side of its kink every element of every piecewise operation
    /// fell on, in recording order: `1` above, `-1` below, `0` within
    /// [`KINK_ZONE`] of it. Two evaluations whose signatures never hold
    /// opposite signs at one position lie in the same smooth region.
    pub fn branch_signature(&self) -> &[i8] {
        &self.branches
    }

    /// Records the kink-relative position of every value in `xs`.
    pub(crate) fn record_branches(&mut self, xs: &[f64]) {
        self.branches.extend(xs.iter().map(|&x| {
            if x > KINK_ZONE {
                1
            } else if x < -KINK_ZONE {
                -1
            } else {
                0
            }
        }));
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation result. The backward closure is dropped when no
    /// parent needs a gradient.
    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.dims(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = back(&g, &parent_vals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.dims(), self.nodes[p].value.dims());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the root did not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.dims(v)))
    }

    /// Gradients of every parameter bound on `graph`, keyed by name.
    pub fn params(&self, graph: &Graph) -> ParamMap {
        graph
            .bound_params()
            .map(|(name, v)| (name.to_string(), self.get_or_zeros(graph, v)))
            .collect()
    }
}
