//! Dense float32 tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is built implicitly: every op produces a new
//! [`Tensor`] holding its parents and a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks the graph once in reverse
//! topological order and accumulates gradients on every reachable tensor
//! that requires them. [`Tensor::detach`] severs the graph, and
//! [`no_grad`] disables recording entirely for cheap inference passes.
//!
//! Storage is row-major `f32`. Shape violations panic with both shapes in
//! the message; they are programming errors, not runtime conditions.

mod conv;
mod linalg;
mod ops;

pub use conv::batchnorm1d;
pub use ops::concat;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Denominator floor for row normalization (all-zero rows stay finite).
pub const EPS_NORM: f32 = 1e-12;
/// Additive guard inside every `log` used by losses.
pub const EPS_LOG: f32 = 1e-8;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while gradient recording is active on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with gradient recording disabled. Ops executed inside produce
/// constant tensors with no parents.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let _guard = Guard(prev);
    f()
}

pub(crate) type Buffer = Rc<RefCell<Vec<f32>>>;

type BackwardFn = Box<dyn Fn(&[f32])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Buffer,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Shared handle to a node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward_fn,
            }),
        }
    }

    /// Leaf constant (no gradient).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::new_inner(data, shape.to_vec(), false, Vec::new(), None)
    }

    /// Leaf parameter that accumulates gradients.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::new_inner(data, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![v], &[1])
    }

    /// Output node of an op. Records parents and a backward closure only
    /// while grad recording is on and at least one parent needs gradients.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward_fn: impl Fn(&[f32]) + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Tensor::new_inner(data, shape, true, parents, Some(Box::new(backward_fn)))
        } else {
            Tensor::new_inner(data, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle gradient accumulation on a leaf (used for freezing groups).
    pub fn set_requires_grad(&self, value: bool) {
        assert!(
            self.inner.backward_fn.is_none(),
            "requires_grad can only be toggled on leaf tensors"
        );
        self.inner.requires_grad.set(value);
    }

    pub(crate) fn buffer(&self) -> Buffer {
        Rc::clone(&self.inner.data)
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Run `f` over the value buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    /// Overwrite the value buffer in place (optimizer updates, loading).
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(
            d.len(),
            values.len(),
            "set_data length {} does not match tensor shape {:?}",
            values.len(),
            self.inner.shape
        );
        d.copy_from_slice(values);
    }

    /// Mutate the value buffer in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, no parents: gradient flow to the ancestors is severed.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.to_vec(), &self.inner.shape)
    }

    pub fn has_finite_values(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Add a contribution into this tensor's gradient buffer. No-op for
    /// tensors that do not require gradients.
    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [f32])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let grad = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(grad);
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate on every
    /// reachable tensor with `requires_grad`; call repeatedly to sum
    /// gradients from several losses.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.inner.shape
        );
        self.accum_grad(|g| g[0] += 1.0);

        let order = topo_order(self);
        for node in order.iter().rev() {
            if !node.requires_grad() {
                continue;
            }
            let grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            if let Some(backward) = &node.inner.backward_fn {
                backward(&grad);
            }
        }
    }
}

/// Iterative post-order DFS over parents; each node visited once.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, next parent index to expand)
    let mut stack: Vec<(Tensor, usize)> = Vec::new();

    if visited.insert(root.id()) {
        stack.push((root.clone(), 0));
    }
    while let Some((node, pi)) = stack.pop() {
        if pi < node.inner.parents.len() {
            let parent = node.inner.parents[pi].clone();
            stack.push((node, pi + 1));
            if visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
        assert!(!t.requires_grad());
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_mismatch_panics() {
        let _ = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]);
    }

    #[test]
    fn backward_through_shared_node_accumulates() {
        // y = (a * a) + a  =>  dy/da = 2a + 1
        let a = Tensor::param(vec![3.0], &[1]);
        let y = a.mul(&a).add(&a);
        y.backward();
        assert_eq!(a.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn detach_severs_ancestors() {
        let x = Tensor::param(vec![2.0], &[1]);
        let w = Tensor::param(vec![5.0], &[1]);
        let y = x.mul_scalar(3.0).detach();
        let loss = y.mul(&w).sum_all();
        loss.backward();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
        assert!(x.grad().is_none(), "detached ancestor must receive no grad");
    }

    #[test]
    fn detach_of_constant_equals_constant() {
        let c = Tensor::from_vec(vec![1.5, -2.0], &[2]);
        assert_eq!(c.detach().to_vec(), c.to_vec());
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let a = Tensor::param(vec![1.0, 2.0], &[2]);
        let y = no_grad(|| a.mul_scalar(2.0));
        assert!(!y.requires_grad());
        let loss = y.sum_all();
        loss.backward();
        assert!(a.grad().is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let a = Tensor::param(vec![1.0], &[1]);
        let y1 = a.mul_scalar(2.0).sum_all();
        let y2 = a.mul_scalar(3.0).sum_all();
        y1.backward();
        y2.backward();
        assert_eq!(a.grad().unwrap(), vec![5.0]);
    }
}
