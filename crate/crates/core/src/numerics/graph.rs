//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation returns a [`Var`] that holds its value and,
//! when any input requires a gradient, the inputs plus a [`Function`] that
//! maps the output gradient to input gradients. Nodes whose inputs are all
//! constants drop their inputs immediately, so inference keeps only live values.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded operation.
pub(crate) trait Function {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, in input order. Entries for
    /// inputs that do not require a gradient may be `None`.
    fn backward(&self, inputs: &[Var], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
    inputs: Vec<Var>,
    function: Option<Box<dyn Function>>,
}

impl Drop for Node {
    // Unlink iteratively so dropping a long chain of nodes does not recurse.
    fn drop(&mut self) {
        let mut pending = core::mem::take(&mut self.inputs);
        while let Some(var) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                pending.append(&mut node.inputs);
            }
        }
    }
}

/// Handle to a value in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.function.as_ref().map(|func| func.name()))
            .finish()
    }
}

impl Var {
    /// Leaf that accumulates a gradient during [`Var::backward`].
    pub fn param(value: Tensor) -> Var {
        Self::leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node { value, requires_grad, grad: RefCell::new(None), inputs: Vec::new(), function: None }))
    }

    /// Records the result of an operation. With `debug_assertions` enabled,
    /// non-finite outputs are reported as errors.
    pub(crate) fn from_op(value: Tensor, inputs: Vec<Var>, function: impl Function + 'static) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(function.name()));
        }
        let requires_grad = inputs.iter().any(Var::requires_grad);
        let node = if requires_grad {
            Node { value, requires_grad, grad: RefCell::new(None), inputs, function: Some(Box::new(function)) }
        } else {
            Node { value, requires_grad, grad: RefCell::new(None), inputs: Vec::new(), function: None }
        };
        Ok(Var(Rc::new(node)))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.function.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Propagates d(self)/d(leaf) into every reachable leaf that requires a
    /// gradient. Leaf gradients accumulate across calls until
    /// [`Var::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::DetachedLoss);
        }

        let order = self.topological_order();
        let mut grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        grads.insert(self.key(), Tensor::ones(self.shape()));

        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.key()) else {
                continue;
            };
            let Some(function) = node.0.function.as_ref() else {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&grad)?,
                    None => *slot = Some(grad),
                }
                continue;
            };
            let input_grads = function.backward(&node.0.inputs, &node.0.value, &grad);
            debug_assert_eq!(input_grads.len(), node.0.inputs.len());
            for (input, g) in node.0.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), input.shape(), "{}", function.name());
                match grads.get_mut(&input.key()) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(input.key(), g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, inputs before
    /// consumers; each node appears once.
    fn topological_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = BTreeMap::new();
        // (node, next input index to visit)
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key(), ());
        while let Some((node, next)) = stack.pop() {
            if let Some(input) = node.0.inputs.get(next) {
                let input = input.clone();
                stack.push((node, next + 1));
                if input.requires_grad() && visited.insert(input.key(), ()).is_none() {
                    stack.push((input, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
