use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::shape;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations on the current thread record autodiff history.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Sets the grad mode of the current thread until the guard is dropped.
pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disables history recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

/// Backward rule of a recorded operation.
///
/// Rules must be written in terms of `Tensor` operations so that, when the
/// backward pass runs with grad mode enabled, the gradient computation is
/// itself recorded and can be differentiated again.
pub(crate) trait BackwardOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

pub(crate) struct Node {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) op: Box<dyn BackwardOp>,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

impl Drop for Inner {
    // Long graphs would otherwise be torn down recursively.
    fn drop(&mut self) {
        let Some(node) = self.node.take() else {
            return;
        };
        let mut stack = node.inputs;
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(n) = inner.node.take() {
                    stack.extend(n.inputs);
                }
            }
        }
    }
}

/// Dense row-major `f64` tensor with optional autodiff history.
///
/// Cloning is cheap: storage and history are reference counted.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl Tensor {
    fn new_inner(data: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(data.len(), shape::numel(&shape));
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    /// Builds a constant tensor. Panics if `data.len()` does not match `shape`.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape::numel(shape),
            "from_vec: {} values do not fill shape {:?}",
            data.len(),
            shape
        );
        Self::new_inner(Arc::new(data), shape.to_vec(), false, None)
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.to_vec(), shape)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; shape::numel(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    /// Result of an operation. History is recorded only when grad mode is
    /// on and at least one input requires a gradient.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, inputs: Vec<Tensor>, op: impl BackwardOp + 'static) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::new_inner(Arc::new(data), shape, true, Some(Node { inputs, op: Box::new(op) }))
        } else {
            Self::new_inner(Arc::new(data), shape, false, None)
        }
    }

    /// Same as `from_op` but shares existing storage (used by reshape).
    pub(crate) fn from_op_shared(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        op: impl BackwardOp + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::new_inner(data, shape, true, Some(Node { inputs, op: Box::new(op) }))
        } else {
            Self::new_inner(data, shape, false, None)
        }
    }

    /// A new leaf sharing this tensor's storage that accumulates gradients.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::new_inner(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// A new constant leaf sharing this tensor's storage.
    pub fn detach(&self) -> Self {
        Self::new_inner(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Unique identity of this tensor value; gradients are keyed by it.
    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn storage(&self) -> &Arc<Vec<f64>> {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Replaces this (leaf) tensor with new values of the same shape, keeping
    /// its `requires_grad` flag. The result is a fresh leaf with a new id.
    pub fn replace_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "replace_data: length mismatch");
        let rg = self.requires_grad();
        *self = Self::new_inner(Arc::new(data), self.0.shape.clone(), rg, None);
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
