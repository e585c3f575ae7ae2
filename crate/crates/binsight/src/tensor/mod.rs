//! Dense n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! The design is define-by-run: every operation that depends on a tensor
//! marked with [`Tensor::requires_grad`] records its inputs and a backward
//! rule on the output node. [`Tensor::backward`] walks the recorded graph in
//! reverse topological order and accumulates `dLoss/dTensor` into each
//! participating tensor, adding over fan-out. Operations never mutate their
//! inputs; the only sanctioned in-place mutation is the optimizer update in
//! [`optim::AdamW`].
//!
//! All values are stored as `f64`. Model checkpoints quantize to little-endian
//! `f32` at the file boundary (see [`crate::checkpoint`]).

mod linalg;
mod ops;

pub mod gradcheck;
pub mod optim;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: maps the gradient w.r.t. the output to gradients w.r.t.
/// each parent (in parent order). `None` entries mean "no gradient flows".
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a tensor node. Cloning is cheap (reference count bump)
/// and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Builds an op result, recording the graph edge only when some parent
    /// participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if parents.iter().any(Tensor::needs_grad) {
            Tensor::new_node(shape, data, false, parents, Some(backward))
        } else {
            Tensor::new_node(shape, data, false, Vec::new(), None)
        }
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; n], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![value; n], false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_node(vec![], vec![value], false, Vec::new(), None)
    }

    /// Marks this tensor as a differentiable leaf; [`Tensor::backward`] will
    /// populate its gradient.
    pub fn requires_grad(self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.inner.data.borrow().clone()),
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Copy of the values, severed from any recorded graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of {} values", d.len());
        d[0]
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.backward.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// True when every stored value is finite (the checked mode used by the
    /// training loops as a NaN guard).
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// In-place value update for optimizers. Not an operation: it bypasses
    /// the graph and must only be applied to leaves between steps.
    pub(crate) fn apply_update(&self, f: impl FnMut(usize, &mut f64)) {
        let mut data = self.inner.data.borrow_mut();
        let mut f = f;
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
    }

    /// Overwrites the stored values (used by checkpoint loading).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidShape {
                op: "set_data",
                shape: self.shape().to_vec(),
                reason: format!("got {} values", values.len()),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Walks the recorded operations in reverse topological order and
    /// accumulates gradients into every tensor marked `requires_grad`.
    /// Gradients add over fan-out and over repeated `backward` calls;
    /// use [`Tensor::zero_grad`] (or the optimizer) to reset them.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.inner.id) else {
                continue;
            };
            if node.inner.requires_grad {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(backward) = &node.inner.backward {
                let parent_grads = backward(&g);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.needs_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.len());
                    grads
                        .entry(parent.inner.id)
                        .and_modify(|acc| {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += b;
                            }
                        })
                        .or_insert(pg);
                }
            }
        }
        Ok(())
    }

    /// Post-order DFS over the recorded graph; the returned list is a
    /// topological order (every producer precedes its consumers).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut state: HashMap<u64, bool> = HashMap::new(); // false = open, true = done
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        state.insert(self.inner.id, false);

        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.inner.parents[child].clone();
                if parent.needs_grad() && !state.contains_key(&parent.inner.id) {
                    state.insert(parent.inner.id, false);
                    stack.push((parent, 0));
                }
            } else {
                state.insert(node.inner.id, true);
                order.push(node);
            }
        }
        order
    }
}
