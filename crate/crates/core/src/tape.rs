//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value, the ids of its inputs
//! and a backward rule. [`Tape::backward`] walks the nodes in exact reverse
//! creation order, so a node's gradient is complete before its rule runs and
//! shared subexpressions accumulate additively.
//!
//! ```
//! use dyngate_core::tape::Tape;
//! use dyngate_core::tensor::Tensor;
//! use dyngate_core::ops;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let y = ops::sum(&ops::mul(&x, &x).unwrap());
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward rule: receives the output gradient and a per-input "needs grad"
/// mask, returns one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    retain: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    kink_margin: f64,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Rc<Tensor>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                kink_margin: f64::INFINITY,
            })),
        }
    }

    /// A differentiable input; its gradient is retained by `backward`.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.record(value, Vec::new(), None, true, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.record(value, Vec::new(), None, false, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an op output. The backward rule is dropped when no input needs a gradient.
    pub fn push(
        &self,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        for v in inputs {
            assert!(
                Rc::ptr_eq(&v.tape.inner, &self.inner),
                "op mixes vars from different tapes"
            );
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let inner = self.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        let rule: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.record(value, ids, rule, requires_grad, false)
    }

    fn record(
        &self,
        value: Tensor,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
        retain: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            inputs,
            backward,
            requires_grad,
            retain,
        });
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
        }
    }

    /// Records the smallest distance from a non-differentiable point (relu at 0,
    /// hard thresholds) seen by any op; finite-difference checks consult it.
    pub fn note_kink(&self, distance: f64) {
        let mut inner = self.inner.borrow_mut();
        if distance < inner.kink_margin {
            inner.kink_margin = distance;
        }
    }

    pub fn kink_margin(&self) -> f64 {
        self.inner.borrow().kink_margin
    }

    /// Propagates d(root)/d(node) for a scalar root.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if root.value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=root.id).rev() {
            let node = &inner.nodes[id];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| inner.nodes[i].requires_grad)
                .collect();
            let contribs = rule(&g, &needs);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for ((&input, c), need) in node.inputs.iter().zip(contribs).zip(needs) {
                if !need {
                    continue;
                }
                let Some(c) = c else { continue };
                match &mut grads[input] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), c.shape());
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
            if node.retain {
                grads[id] = Some(g);
            }
        }
        for (id, node) in inner.nodes.iter().enumerate() {
            if !node.retain {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared_value(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Keeps this intermediate's gradient after `backward`.
    pub fn retain_grad(&self) {
        self.tape.inner.borrow_mut().nodes[self.id].retain = true;
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the var's shape when it did not reach the root.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
