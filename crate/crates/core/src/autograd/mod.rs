//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every differentiable computation in the crate records onto a [`Tape`].
//! Gradient checks need stop-gradient points to behave as constants while the
//! inputs are perturbed, so [`Tape::detach`] values can be logged on one pass
//! and replayed on later passes with [`Tape::with_frozen`].

mod conv;
mod ops;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::tensor::Tensor;

pub use conv::ConvGeometry;

type GradFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Default)]
struct DetachLog {
    frozen: Option<Vec<Tensor>>,
    recorded: Vec<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    detached: RefCell<DetachLog>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `detach` calls return the given values, in call order,
    /// instead of the values computed on this tape.
    pub fn with_frozen(frozen: Vec<Tensor>) -> Self {
        let tape = Self::default();
        tape.detached.borrow_mut().frozen = Some(frozen);
        tape
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.borrow().recorded.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: vec![], requires_grad, grad_fn: None });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var], grad_fn: GradFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            grad_fn: requires_grad.then_some(grad_fn),
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |nodes| nodes[v.0].value.as_ref())
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Stop-gradient. Under [`Tape::with_frozen`] the replayed value is used.
    pub fn detach(&self, v: Var) -> Var {
        let computed = self.value(v).clone();
        let value = {
            let mut log = self.detached.borrow_mut();
            let index = log.recorded.len();
            let value = match &log.frozen {
                Some(frozen) => {
                    let replay = frozen.get(index).cloned().expect("frozen detach log exhausted");
                    assert_eq!(replay.shape(), computed.shape(), "frozen detach shape changed");
                    replay
                }
                None => computed,
            };
            log.recorded.push(value.clone());
            value
        };
        self.constant(value)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape(), 1.0));
        for index in (0..=output.0).rev() {
            let Some(grad_fn) = nodes[index].grad_fn.as_ref() else { continue };
            let Some(grad) = grads[index].take() else { continue };
            let parents = &nodes[index].parents;
            let mask: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = grad_fn(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((&parent, pg), &needed) in parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(pg), true) = (pg, needed) else { continue };
                match &mut grads[parent] {
                    Some(existing) => existing.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros of the given shape when nothing flowed into `v`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
