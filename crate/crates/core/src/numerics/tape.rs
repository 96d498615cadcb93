//! Define-by-run gradient tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a backward rule mapping the output gradient to one
//! gradient per parent. Nodes are appended in evaluation order, so a reverse
//! sweep over the node list is a valid topological order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Maps the output gradient to one optional gradient per parent, in parent order.
pub type BackwardFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Option<Tensor<S>>>>;

/// Leaf gradients keyed by parameter name.
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    leaf: bool,
    name: Option<String>,
    grad: Option<Tensor<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that records values only; nothing requires a gradient.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn leaf_node(&self, value: Tensor<S>, requires_grad: bool, name: Option<String>) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            leaf: true,
            name,
            grad: None,
        })
    }

    /// Input that takes no gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf_node(value, false, None)
    }

    /// Anonymous leaf; `requires_grad` controls gradient accumulation.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.leaf_node(value, requires_grad, None)
    }

    /// Named trainable leaf; its gradient is reported by [`Tape::gradients`].
    pub fn param(&self, name: impl Into<String>, value: Tensor<S>) -> Var<'_, S> {
        self.leaf_node(value, true, Some(name.into()))
    }

    /// Records an op result. `backward` is dropped when no parent needs a
    /// gradient. Non-finite outputs are rejected.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<S>,
        parents: &[Var<'t, S>],
        backward: impl Fn(&Tensor<S>) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Result<Var<'t, S>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            leaf: false,
            name: None,
            grad: None,
        }))
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                leaf_grads.push((id, g));
                continue;
            }
            let Some(rule) = &node.backward else { continue };
            let parent_grads = rule(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "grad shape for parent {pid}");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulated gradients of named parameters. Parameters that never
    /// received a gradient report zeros.
    pub fn gradients(&self) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        let mut out = Gradients::new();
        for n in nodes.iter().filter(|n| n.leaf && n.requires_grad) {
            if let Some(name) = &n.name {
                let g = n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self) -> Option<Tensor<S>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant((*self.value()).clone())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }
}
