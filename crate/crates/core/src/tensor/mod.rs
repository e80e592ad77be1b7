//! Dense NCHW tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: shape plus shared storage. Operations
//! build a tape of nodes behind the scenes whenever an operand is tracked;
//! [`Tensor::backward`] walks that tape once, accumulating gradients into the
//! tracked leaves. Storage is `f32` by default; every kernel is generic over
//! [`Scalar`] so gradient checks can run the identical code path in `f64`.

mod kernels;
mod ops;

pub use ops::{
    add, batchnorm, conv2d, conv2d_transposed, downsample, relu, squared_error, BatchNormState,
    ConvSpec, Reduction,
};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of a tensor. `f32` is the working precision; `f64` exists so
/// finite-difference checks can exercise the same generic kernels without
/// truncation noise drowning the comparison.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_node_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Per-parent gradient contributions. `None` marks a parent that is not
/// tracked, so the op skipped computing its gradient.
type Contributions<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Contributions<T>>;

struct Node<T: Scalar> {
    id: u64,
    parents: Vec<Tensor<T>>,
    /// `None` for leaves.
    backward: Option<BackwardFn<T>>,
    /// Gradient accumulator; only leaves ever hold one.
    grad: RefCell<Option<Vec<T>>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Rc<Node<T>>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "shape {:?} implies {} elements but the buffer holds {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// Internal constructor for op results. Attaches a tape node only when at
    /// least one parent is tracked; otherwise the closure is dropped and the
    /// result is a plain value.
    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}: bad output shape");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: non-finite value in forward output"
        );
        let tracked = parents.iter().any(|p| p.node.is_some());
        let node = tracked.then(|| {
            Rc::new(Node {
                id: next_node_id(),
                parents,
                backward: Some(backward),
                grad: RefCell::new(None),
            })
        });
        Self {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    /// Marks this tensor as a differentiation leaf: gradients accumulate on
    /// it across calls to [`Tensor::backward`].
    pub fn tracked(mut self) -> Self {
        if self.node.is_none() {
            self.node = Some(Rc::new(Node {
                id: next_node_id(),
                parents: Vec::new(),
                backward: None,
                grad: RefCell::new(None),
            }));
        }
        self
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// A view of the same storage with no tape attached.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Replaces the storage in place (used by the optimizer). The tensor gets
    /// a fresh leaf node, so any previously accumulated gradient is dropped.
    pub fn replace_data(&mut self, data: Vec<T>) {
        assert_eq!(data.len(), self.data.len(), "replace_data: length changed");
        let tracked = self.node.is_some();
        self.data = Arc::new(data);
        self.node = None;
        if tracked {
            *self = std::mem::take(self).tracked();
        }
    }

    /// The accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.as_ref()?.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        if let Some(node) = &self.node {
            *node.grad.borrow_mut() = None;
        }
    }

    /// Test-only: accumulates a crafted gradient into a leaf, bypassing the
    /// tape (e.g. to exercise non-finite gradient handling downstream).
    #[cfg(test)]
    pub(crate) fn inject_grad(&self, g: Vec<T>) {
        assert_eq!(g.len(), self.numel());
        let node = self.node.as_ref().expect("inject_grad on an untracked tensor");
        let mut slot = node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => kernels::add_into(acc, &g),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar. Walks the tape in reverse creation
    /// order (creation order is topological: every op's inputs exist before
    /// its output) and accumulates gradients into tracked leaves.
    pub fn backward(&self) -> Result<()> {
        if self.data.len() != 1 {
            return Err(Error::Unsupported {
                op: "backward",
                detail: format!("expected a scalar loss, got shape {:?}", self.shape),
            });
        }
        let root = self.node.as_ref().ok_or_else(|| Error::Unsupported {
            op: "backward",
            detail: "loss is not connected to any tracked tensor".into(),
        })?;

        // Collect reachable nodes, then process by descending id.
        let mut stack: Vec<Rc<Node<T>>> = vec![Rc::clone(root)];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Rc<Node<T>>> = Vec::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id) {
                continue;
            }
            for p in &n.parents {
                if let Some(pn) = &p.node {
                    stack.push(Rc::clone(pn));
                }
            }
            nodes.push(n);
        }
        nodes.sort_by(|a, b| b.id.cmp(&a.id));

        let mut grads: std::collections::HashMap<u64, Vec<T>> = std::collections::HashMap::new();
        grads.insert(root.id, vec![T::one()]);

        for node in &nodes {
            let Some(gout) = grads.remove(&node.id) else {
                continue;
            };
            match &node.backward {
                None => {
                    // Leaf: accumulate.
                    let mut slot = node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => kernels::add_into(acc, &gout),
                        None => *slot = Some(gout),
                    }
                }
                Some(f) => {
                    let contribs = f(&gout, &node.parents);
                    debug_assert_eq!(contribs.len(), node.parents.len());
                    for (parent, contrib) in node.parents.iter().zip(contribs) {
                        let (Some(pn), Some(c)) = (&parent.node, contrib) else {
                            continue;
                        };
                        debug_assert_eq!(c.len(), parent.numel(), "gradient/parent length mismatch");
                        match grads.entry(pn.id) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                kernels::add_into(e.get_mut(), &c)
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(c);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tensor<T> {
    fn default() -> Self {
        Tensor::zeros(&[0])
    }
}
