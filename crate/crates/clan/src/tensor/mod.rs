//! Dense n-dimensional tensors with a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto flat row-major storage plus an
//! optional record of the operation that produced it. Running an op on
//! tensors that require gradients links the output back to its inputs;
//! [`Tensor::backward`] walks that graph once in reverse topological order
//! and accumulates `dLoss/dTensor` into every reachable tensor that requires
//! a gradient.
//!
//! All reductions accumulate sequentially in flat index order, so identical
//! inputs produce bitwise-identical outputs.

mod ops;

pub mod gradcheck;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{ClanError, Result};

/// Scalar element type of a tensor; the crate is generic over f32/f64.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Per-input gradient contributions returned by a backward rule; `None` for
/// inputs that do not need a gradient.
pub(crate) type GradContribs<E> = Vec<Option<Vec<E>>>;

/// Context handed to a backward rule.
pub(crate) struct BackwardArgs<'a, E: Element> {
    /// The recorded inputs of the op, in call order.
    pub inputs: &'a [Tensor<E>],
    /// Gradient of the loss w.r.t. the op output, flat.
    pub out_grad: &'a [E],
    /// Which input slots need a gradient computed.
    pub needs: &'a [bool],
}

type BackwardFn<E> = Box<dyn Fn(&BackwardArgs<'_, E>) -> GradContribs<E>>;

/// One recorded operation: its inputs and the rule that maps the output
/// gradient back onto them.
struct OpNode<E: Element> {
    inputs: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    parent: Option<OpNode<E>>,
}

/// N-dimensional real array with optional gradient buffer.
pub struct Tensor<E: Element> {
    inner: Rc<RefCell<Inner<E>>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={})",
            E::NAME,
            inner.shape,
            inner.requires_grad
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn from_inner(inner: Inner<E>) -> Self {
        debug_assert_eq!(inner.data.len(), numel_of(&inner.shape));
        Tensor {
            inner: Rc::new(RefCell::new(inner)),
        }
    }

    /// Leaf tensor from flat row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(ClanError::dimension(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel_of(shape), data.len()),
            ));
        }
        Ok(Tensor::from_inner(Inner {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            parent: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_inner(Inner {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel_of(shape)],
            grad: None,
            requires_grad: false,
            parent: None,
        })
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor::from_inner(Inner {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
            grad: None,
            requires_grad: false,
            parent: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: E) -> Self {
        Tensor::from_inner(Inner {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
            parent: None,
        })
    }

    /// Trainable leaf: requires a gradient.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let t = Tensor::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    /// Output of a recorded op. The node is attached only when some input
    /// requires a gradient; otherwise the graph is pruned at this point.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        inputs: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let parent = if requires_grad {
            Some(OpNode { inputs, backward })
        } else {
            None
        };
        Tensor::from_inner(Inner {
            shape,
            data,
            grad: None,
            requires_grad,
            parent,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        let mut inner = self.inner.borrow_mut();
        inner.requires_grad = value;
        if !value {
            inner.grad = None;
        }
    }

    /// Borrow the flat data.
    pub fn data(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.borrow(), |inner| inner.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.inner.borrow().data.clone()
    }

    /// Replace the data in place (same length). Used by the optimizer and by
    /// finite-difference probes; never call between forward and backward.
    pub fn set_data(&self, data: &[E]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    /// Drop the gradient buffer. Trainers call this between steps;
    /// without it, repeated backward calls accumulate.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Detached copy: same data, no graph history.
    pub fn detach(&self) -> Self {
        Tensor::from_inner(Inner {
            shape: self.shape(),
            data: self.data_vec(),
            grad: None,
            requires_grad: false,
            parent: None,
        })
    }

    fn accumulate_grad(&self, contrib: &[E]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(contrib.len(), inner.data.len());
        match &mut inner.grad {
            Some(grad) => {
                for (g, c) in grad.iter_mut().zip(contrib) {
                    *g += *c;
                }
            }
            None => inner.grad = Some(contrib.to_vec()),
        }
    }

    fn key(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    /// Post-order DFS over the recorded graph; inputs precede outputs and
    /// each node appears exactly once.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            let inner = t.inner.borrow();
            if let Some(node) = &inner.parent {
                for input in &node.inputs {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively across fan-out and across repeated calls.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(ClanError::usage(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(ClanError::usage(
                "backward",
                "loss does not depend on any tensor requiring gradients",
            ));
        }
        let order = self.topo_order();
        // Interior gradients are scratch space for this sweep; only leaf
        // gradients persist and accumulate across calls.
        for t in &order {
            if t.inner.borrow().parent.is_some() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(&[E::one()]);
        for t in order.iter().rev() {
            let out_grad = {
                let inner = t.inner.borrow();
                if inner.parent.is_none() {
                    continue;
                }
                match &inner.grad {
                    Some(g) => g.clone(),
                    // No gradient reached this node (dead branch).
                    None => continue,
                }
            };
            let inner = t.inner.borrow();
            let node = inner.parent.as_ref().unwrap();
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
            let contribs = (node.backward)(&BackwardArgs {
                inputs: &node.inputs,
                out_grad: &out_grad,
                needs: &needs,
            });
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (input, contrib) in node.inputs.iter().zip(contribs.iter()) {
                if let Some(c) = contrib {
                    input.accumulate_grad(c);
                }
            }
        }
        Ok(())
    }
}

pub use ops::{concat_channels, cross_entropy, linear, PoolMode, ResampleMode};

#[cfg(test)]
mod tests;
