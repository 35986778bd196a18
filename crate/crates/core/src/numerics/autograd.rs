//! Define-by-run reverse-mode differentiation.
//!
//! A [`Var`] owns a value and, when it was produced by a differentiable op
//! with at least one grad-requiring input, a link back to that op and its
//! inputs. Those links are the tape: they keep saved activations alive until
//! the output is dropped. Outside of gradient tracking (see [`no_grad`]) ops
//! return detached leaves, so intermediate activations are freed as soon as
//! the caller drops them.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use super::scalar::Scalar;
use super::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Disables tape recording on this thread until dropped.
pub struct NoGradGuard {
    _private: (),
}

pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard { _private: () }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

/// Backward rule of one recorded op.
pub trait BackwardOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means
    /// "no contribution".
    fn backward(
        &self,
        inputs: &[Var<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

struct GradFn<T: Scalar> {
    op: Box<dyn BackwardOp<T>>,
    inputs: Vec<Var<T>>,
}

struct Node<T: Scalar> {
    id: u64,
    value: RwLock<Tensor<T>>,
    grad: Mutex<Option<Tensor<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Shared handle to a value in the computation graph.
pub struct Var<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.op_name())
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RwLock::new(value),
            grad: Mutex::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// Trainable leaf.
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    /// Output of a differentiable op. Records the op only when tracking is
    /// on and some input needs a gradient.
    pub fn from_op(value: Tensor<T>, op: impl BackwardOp<T> + 'static, inputs: Vec<Var<T>>) -> Self {
        if grad_enabled() && inputs.iter().any(Var::requires_grad) {
            Self::make(
                value,
                true,
                Some(GradFn {
                    op: Box::new(op),
                    inputs,
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.grad_fn.as_ref().map_or("leaf", |g| g.op.name())
    }

    pub fn inputs(&self) -> &[Var<T>] {
        self.0.grad_fn.as_ref().map_or(&[], |g| &g.inputs)
    }

    pub fn value(&self) -> RwLockReadGuard<'_, Tensor<T>> {
        self.0.value.read().expect("tensor lock poisoned")
    }

    pub fn value_mut(&self) -> RwLockWriteGuard<'_, Tensor<T>> {
        self.0.value.write().expect("tensor lock poisoned")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.lock().expect("grad lock poisoned").take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate(&self, g: Tensor<T>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc
                .add_scaled(T::one(), &g)
                .expect("gradient shape differs from accumulated gradient"),
            None => *slot = Some(g),
        }
    }

    /// Back-propagates from this scalar, accumulating `grad` on every
    /// reachable leaf that requires one. Intermediate gradients are released
    /// as soon as they have been propagated.
    pub fn backward(&self) {
        assert_eq!(
            self.value().numel(),
            1,
            "backward() needs a scalar output, got {:?}",
            self.shape()
        );
        self.backward_with(Tensor::full(&self.shape(), T::one()));
    }

    pub fn backward_with(&self, seed: Tensor<T>) {
        if !self.requires_grad() {
            return;
        }
        self.accumulate(seed);
        for node in topo_order(self).into_iter().rev() {
            let Some(gfn) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = node.take_grad() else {
                continue;
            };
            let grads = {
                let out = node.value();
                gfn.op.backward(&gfn.inputs, &out, &g)
            };
            debug_assert_eq!(grads.len(), gfn.inputs.len(), "{}", gfn.op.name());
            for (input, grad) in gfn.inputs.iter().zip(grads) {
                if let Some(grad) = grad {
                    if input.requires_grad() {
                        input.accumulate(grad);
                    }
                }
            }
        }
    }
}

/// Recorded nodes reachable from `root`, inputs before consumers. Each node
/// appears exactly once.
pub fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for inp in v.inputs() {
            if inp.requires_grad() && !seen.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}
