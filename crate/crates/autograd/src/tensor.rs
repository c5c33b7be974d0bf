use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Branch decisions taken by the piecewise ops (ReLU side, clamp region,
/// argmax position) of one evaluation, in execution order.
#[derive(Clone, Debug, Default)]
pub struct BranchTape {
    decisions: Vec<Vec<usize>>,
}

impl BranchTape {
    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

/// What happened while replaying a [`BranchTape`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplayStats {
    /// Elements whose natural decision differed from the replayed one.
    pub flips: usize,
    /// The evaluation's sequence of piecewise ops did not match the tape.
    pub diverged: bool,
}

enum BranchMode {
    Off,
    Record(BranchTape),
    Replay {
        tape: Arc<BranchTape>,
        cursor: usize,
        stats: ReplayStats,
    },
}

thread_local! {
    static BRANCHES: std::cell::RefCell<BranchMode> = const { std::cell::RefCell::new(BranchMode::Off) };
}

fn with_branch_mode<R>(mode: BranchMode, f: impl FnOnce() -> R) -> (R, BranchMode) {
    struct Restore(Option<BranchMode>);
    impl Drop for Restore {
        fn drop(&mut self) {
            if let Some(prev) = self.0.take() {
                BRANCHES.with(|b| *b.borrow_mut() = prev);
            }
        }
    }
    let prev = BRANCHES.with(|b| std::mem::replace(&mut *b.borrow_mut(), mode));
    let mut restore = Restore(Some(prev));
    let out = f();
    let prev = restore.0.take().expect("restored once");
    let finished = BRANCHES.with(|b| std::mem::replace(&mut *b.borrow_mut(), prev));
    (out, finished)
}

/// Runs `f`, recording the decisions of every piecewise op it evaluates.
pub fn record_branches<R>(f: impl FnOnce() -> R) -> (R, BranchTape) {
    match with_branch_mode(BranchMode::Record(BranchTape::default()), f) {
        (out, BranchMode::Record(tape)) => (out, tape),
        _ => unreachable!("branch mode changed underneath"),
    }
}

/// Runs `f` with every piecewise op forced onto the branch recorded in
/// `tape`, so `f` is evaluated on the smooth piece the tape was taken on.
/// Both the values and the derivative rules follow the replayed branches.
pub fn replay_branches<R>(tape: &BranchTape, f: impl FnOnce() -> R) -> (R, ReplayStats) {
    let mode = BranchMode::Replay {
        tape: Arc::new(tape.clone()),
        cursor: 0,
        stats: ReplayStats::default(),
    };
    match with_branch_mode(mode, f) {
        (
            out,
            BranchMode::Replay {
                tape,
                cursor,
                mut stats,
            },
        ) => {
            stats.diverged |= cursor != tape.len();
            (out, stats)
        }
        _ => unreachable!("branch mode changed underneath"),
    }
}

/// Hook for piecewise ops: takes the naturally chosen branches and returns
/// the ones to apply.
pub(crate) fn branch_point(natural: Vec<usize>) -> Vec<usize> {
    BRANCHES.with(|b| match &mut *b.borrow_mut() {
        BranchMode::Off => natural,
        BranchMode::Record(tape) => {
            tape.decisions.push(natural.clone());
            natural
        }
        BranchMode::Replay { tape, cursor, stats } => match tape.decisions.get(*cursor) {
            Some(forced) if forced.len() == natural.len() => {
                *cursor += 1;
                stats.flips += forced.iter().zip(&natural).filter(|(a, b)| a != b).count();
                forced.clone()
            }
            _ => {
                stats.diverged = true;
                natural
            }
        },
    })
}

/// Whether newly created op results record their history on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched to `enabled`, restoring the previous
/// mode afterwards (also on unwind).
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Local derivative rule of a recorded op.
///
/// `needs[i]` tells whether a gradient for `inputs[i]` is wanted; rules may
/// return `None` for inputs that are not needed. Every rule is written in terms
/// of differentiable tensor ops, so running it with recording enabled yields a
/// graph that can itself be differentiated.
pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

pub(crate) struct GradFn {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) rule: Box<dyn Backward>,
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad_fn: Option<GradFn>,
}

/// Immutable, reference-counted n-dimensional array of `f64` in row-major
/// order, optionally carrying the op history needed for differentiation.
///
/// Cloning is cheap (shared storage). Shape misuse in ops panics, in the same
/// way slice indexing does.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Leaf tensor that gradients can be taken with respect to.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel_of(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Result of a differentiable op. History is kept only when recording is
    /// enabled and at least one input requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        rule: impl Backward + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(
                data,
                shape,
                true,
                Some(GradFn {
                    inputs,
                    rule: Box::new(rule),
                }),
            )
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
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
        self.0.grad_fn.is_none()
    }

    /// Identity of the underlying node; stable across clones.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_vec(self.0.data.clone(), &self.0.shape)
    }

    /// Same values as a fresh leaf that requires a gradient.
    pub fn detach_parameter(&self) -> Tensor {
        Self::parameter(self.0.data.clone(), &self.0.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.rule.name())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(op) = self.op_name() {
            s.field("op", &op);
        }
        if self.numel() <= 8 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

// Long op chains would otherwise drop recursively, one stack frame per node.
impl Drop for Node {
    fn drop(&mut self) {
        let Some(grad_fn) = self.grad_fn.take() else {
            return;
        };
        let mut pending = grad_fn.inputs;
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.0) {
                if let Some(g) = node.grad_fn.take() {
                    pending.extend(g.inputs);
                }
            }
        }
    }
}
