use std::cell::RefCell;
use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one recorded op: given the output gradient and which
/// inputs need a gradient, return one entry per input.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Real> {
    /// Tape index of each op input, `None` for untracked inputs.
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<F>>,
}

/// Records differentiable operations for one forward pass.
///
/// A tape built with [`Tape::no_grad`] records nothing: every [`Var`] it
/// produces is a plain value and intermediate buffers are freed as soon as
/// they go out of scope.
pub struct Tape<F: Real = f32> {
    nodes: RefCell<Vec<Node<F>>>,
    grad_enabled: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
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

    /// A differentiable input. Its gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        let node = self.grad_enabled.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            node,
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        Var {
            tape: self,
            node: None,
            value,
        }
    }

    /// Records `value = op(inputs)`. The backward rule is dropped when no
    /// input is tracked.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<F>,
        inputs: &[&Var<'t, F>],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var<'t, F> {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = (self.grad_enabled && parents.iter().any(Option::is_some)).then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents,
                backward: Some(Box::new(backward)),
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            node,
            value,
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: &Var<'_, F>) -> Result<Gradients<F>> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss numel",
                1,
                format!("{} (shape {:?})", loss.value.numel(), loss.value.shape()),
            ));
        }
        let mut leaves = HashMap::new();
        let Some(root) = loss.node else {
            return Ok(Gradients { leaves });
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), F::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = rule(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else { continue };
                match grads[*p].as_mut() {
                    Some(acc) => acc.accumulate(&pg),
                    None => grads[*p] = Some(pg),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Handle to a value computed on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, F: Real = f32> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) node: Option<usize>,
    pub(crate) value: Tensor<F>,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Whether gradients flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.value.clone())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<F: Real = f32> {
    leaves: HashMap<usize, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `leaf`; `None` if it did not influence
    /// the loss or is not a leaf.
    pub fn get(&self, leaf: &Var<'_, F>) -> Option<&Tensor<F>> {
        leaf.node.and_then(|id| self.leaves.get(&id))
    }

    /// Like [`Gradients::get`] but returns zeros for unused leaves.
    pub fn get_or_zeros(&self, leaf: &Var<'_, F>) -> Tensor<F> {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()))
    }
}
