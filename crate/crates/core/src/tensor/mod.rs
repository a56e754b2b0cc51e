//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a cheap handle (`Arc`) to an immutable node. Nodes created
//! by differentiable primitives keep their operands and a backward closure, so
//! the graph reachable from a scalar loss is exactly the record that
//! [`Tensor::backward`] replays in reverse topological order.
//!
//! Parameter tensors are the only nodes whose values change after
//! construction, and only through [`Tensor::update_data`]; gradient buffers
//! change only through `backward`, [`Tensor::zero_grad`] and
//! [`Tensor::take_grad`].

mod conv;
mod grad_check;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

pub use conv::Conv3dGeometry;
pub use grad_check::{grad_check, GradCheckReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// What `log` and `div` do with operands outside their domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonFinitePolicy {
    /// Return [`TensorError::Domain`].
    #[default]
    Reject,
    /// Compute the IEEE result and raise the thread-local non-finite flag.
    Propagate,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static POLICY: Cell<NonFinitePolicy> = const { Cell::new(NonFinitePolicy::Reject) };
    static FLAGGED: Cell<bool> = const { Cell::new(false) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

/// Runs `f` without recording any backward information.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub fn set_non_finite_policy(policy: NonFinitePolicy) {
    POLICY.with(|p| p.set(policy));
}

pub fn non_finite_policy() -> NonFinitePolicy {
    POLICY.with(|p| p.get())
}

/// Returns and clears the flag raised by `Propagate`-mode domain violations.
pub fn take_non_finite_flag() -> bool {
    FLAGGED.with(|f| f.replace(false))
}

pub(crate) fn raise_non_finite_flag() {
    FLAGGED.with(|f| f.set(true));
}

/// Bytes currently held by live tensor buffers (values only).
pub fn live_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak_bytes`].
pub fn peak_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

pub fn reset_peak_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// Inputs available to a primitive's backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub output: &'a [f64],
    pub parents: &'a [Tensor],
}

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

impl Drop for Node {
    fn drop(&mut self) {
        let len = self.data.get_mut().map(|d| d.len()).unwrap_or(0);
        LIVE_BYTES.fetch_sub(len * std::mem::size_of::<f64>(), Ordering::Relaxed);
    }
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let bytes = data.len() * std::mem::size_of::<f64>();
        let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op,
        }))
    }

    /// Builds the result of a primitive. Backward information is kept only
    /// when recording is enabled and some operand requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if grad_enabled() && parents.iter().any(Tensor::requires_grad) {
            let op = Op {
                name,
                parents,
                backward,
            };
            Self::from_parts(data, shape, true, Some(op))
        } else {
            Self::from_parts(data, shape, false, None)
        }
    }

    fn validate(data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(())
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::validate(&data, shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    /// A leaf that accumulates gradients.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::validate(&data, shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![value], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn arange(n: usize) -> Self {
        Self::from_parts((0..n).map(|i| i as f64).collect(), vec![n], false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Name of the primitive that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Overwrites the gradient buffer; the length must match.
    pub fn set_grad(&self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                lhs: self.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        *self.0.grad.lock().expect("grad lock poisoned") = Some(grad);
        Ok(())
    }

    /// Mutates the values of a leaf in place. This is the parameter-update
    /// entry point; calling it on a recorded intermediate is a logic error.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut data);
    }

    /// A new leaf holding a copy of the values, outside any graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Propagates d(self)/d(leaf) into the gradient buffer of every reachable
    /// leaf that requires a gradient. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let record = ComputationRecord::trace(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in record.entries.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let output = t.data();
                    let ctx = BackwardCtx {
                        grad: &g,
                        output: &output,
                        parents: &op.parents,
                    };
                    let parent_grads = (op.backward)(&ctx);
                    debug_assert_eq!(parent_grads.len(), op.parents.len(), "{}", op.name);
                    for (p, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} grad length", op.name);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

/// The recorded primitives reachable from a root, in topological order:
/// every operand of entry `k` appears before `k`.
pub struct ComputationRecord {
    entries: Vec<Tensor>,
}

impl ComputationRecord {
    pub fn trace(root: &Tensor) -> Self {
        let mut entries = Vec::new();
        let mut visited = HashSet::new();
        // iterative post-order DFS; the bool marks "children already pushed"
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                entries.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        ComputationRecord { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    /// Operand ids for each entry (empty for leaves).
    pub fn operands(&self, index: usize) -> Vec<u64> {
        self.entries[index]
            .0
            .op
            .as_ref()
            .map(|op| op.parents.iter().map(Tensor::id).collect())
            .unwrap_or_default()
    }
}
