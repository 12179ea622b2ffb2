//! Dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Operations record onto a per-evaluation [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse and returns gradients for every reachable
//! leaf. Tensors are immutable values; a tape is confined to one evaluation
//! context (it is not `Sync`), and parallel evaluation contexts each own
//! their tape.
//!
//! Every operation validates shapes up front and checks its output for
//! non-finite values: NaN/Inf surface as [`TensorError::NonFinite`] instead
//! of propagating silently.

pub mod kernels;
pub mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Numeric element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: String,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis { op: String, axis: usize, rank: usize },
    #[error("{op}: {expected} values expected for shape, got {got}")]
    LengthMismatch {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value produced{}", fmt_ctx(.context))]
    NonFinite { op: String, context: String },
    #[error("{op}: expected a scalar, got {numel} elements")]
    NotScalar { op: String, numel: usize },
    #[error("{op}: tensor belongs to a different tape")]
    ForeignTensor { op: String },
    #[error("backward: tape was created with gradients disabled")]
    GradDisabled,
    #[error("contract: bad spec '{spec}': {reason}")]
    BadContraction { spec: String, reason: String },
}

fn fmt_ctx(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" in {ctx}")
    }
}

impl TensorError {
    /// Attach a location (e.g. a layer path) to a non-finite error.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            TensorError::NonFinite { op, .. } => TensorError::NonFinite {
                op,
                context: ctx.to_string(),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value on a tape. Cheap to clone; does not own the data.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: usize,
    tape_id: u64,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Node<S: Element> {
    values: Arc<Vec<S>>,
    requires_grad: bool,
    back: Option<BackStep<S>>,
}

/// Backward rule: given the output cotangent, read any node values through
/// `NodeReader` and accumulate parent cotangents into `GradBuf`.
type BackFn<S> = Box<dyn Fn(&[S], &NodeReader<'_, S>, &mut GradBuf<S>)>;

struct BackStep<S: Element> {
    run: BackFn<S>,
}

pub(crate) struct NodeReader<'a, S: Element> {
    nodes: &'a [Node<S>],
}

impl<'a, S: Element> NodeReader<'a, S> {
    fn vals(&self, id: usize) -> &[S] {
        &self.nodes[id].values
    }
}

pub(crate) struct GradBuf<S: Element> {
    slots: Vec<Option<Vec<S>>>,
    sizes: Vec<usize>,
}

impl<S: Element> GradBuf<S> {
    fn new(sizes: Vec<usize>) -> Self {
        GradBuf {
            slots: (0..sizes.len()).map(|_| None).collect(),
            sizes,
        }
    }

    /// Mutable zero-initialized accumulator for node `id`.
    fn slot(&mut self, id: usize) -> &mut [S] {
        if self.slots[id].is_none() {
            self.slots[id] = Some(vec![S::zero(); self.sizes[id]]);
        }
        self.slots[id].as_mut().expect("just filled")
    }

    fn add_weighted(&mut self, id: usize, values: &[S], w: S) {
        let s = self.slot(id);
        for (o, &v) in s.iter_mut().zip(values.iter()) {
            *o = *o + v * w;
        }
    }

    fn add(&mut self, id: usize, values: &[S]) {
        self.add_weighted(id, values, S::one());
    }
}

struct Inner<S: Element> {
    nodes: Vec<Node<S>>,
    bindings: Vec<(usize, String)>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Records operations of one forward pass for reverse-mode differentiation.
pub struct Tape<S: Element> {
    id: u64,
    grad_enabled: bool,
    inner: RefCell<Inner<S>>,
}

impl<S: Element> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Element> Tape<S> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Values-only tape: nothing is recorded, backward is unavailable.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                bindings: Vec::new(),
            }),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub(crate) fn check_owned(&self, op: &str, t: &Tensor) -> Result<()> {
        if t.tape_id != self.id {
            return Err(TensorError::ForeignTensor { op: op.into() });
        }
        Ok(())
    }

    fn push(
        &self,
        values: Arc<Vec<S>>,
        shape: Vec<usize>,
        requires_grad: bool,
        back: Option<BackFn<S>>,
    ) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            values,
            requires_grad,
            back: back.map(|run| BackStep { run }),
        });
        Tensor {
            id,
            tape_id: self.id,
            shape,
        }
    }

    pub(crate) fn next_id(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub(crate) fn requires_grad(&self, t: &Tensor) -> bool {
        self.inner.borrow().nodes[t.id].requires_grad
    }

    /// Record a computed value. `parents_require` decides whether a backward
    /// rule is stored at all; on a no-grad tape it never is.
    pub(crate) fn emit(
        &self,
        op: &'static str,
        values: Vec<S>,
        shape: Vec<usize>,
        parents_require: bool,
        back: impl FnOnce() -> BackFn<S>,
    ) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                op: op.into(),
                expected: shape.iter().product(),
                got: values.len(),
            });
        }
        ensure_finite(op, &values)?;
        let rg = self.grad_enabled && parents_require;
        Ok(self.push(Arc::new(values), shape, rg, if rg { Some(back()) } else { None }))
    }

    /// Like `emit` but shares the value buffer (reshape-style ops).
    pub(crate) fn emit_shared(
        &self,
        values: Arc<Vec<S>>,
        shape: Vec<usize>,
        parents_require: bool,
        back: impl FnOnce() -> BackFn<S>,
    ) -> Tensor {
        let rg = self.grad_enabled && parents_require;
        self.push(values, shape, rg, if rg { Some(back()) } else { None })
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(&self, values: Vec<S>, shape: &[usize]) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                op: "constant".into(),
                expected: shape.iter().product(),
                got: values.len(),
            });
        }
        ensure_finite("constant", &values)?;
        Ok(self.push(Arc::new(values), shape.to_vec(), false, None))
    }

    pub fn constant_shared(&self, values: Arc<Vec<S>>, shape: &[usize]) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                op: "constant".into(),
                expected: shape.iter().product(),
                got: values.len(),
            });
        }
        Ok(self.push(values, shape.to_vec(), false, None))
    }

    pub fn scalar(&self, v: S) -> Tensor {
        self.push(Arc::new(vec![v]), vec![1], false, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        self.push(Arc::new(vec![S::zero(); n]), shape.to_vec(), false, None)
    }

    /// Differentiable leaf. On a no-grad tape this is equivalent to a
    /// constant. `name` links the leaf to a parameter for named gradients.
    pub fn leaf(&self, values: Arc<Vec<S>>, shape: &[usize], name: Option<&str>) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                op: "leaf".into(),
                expected: shape.iter().product(),
                got: values.len(),
            });
        }
        let t = self.push(values, shape.to_vec(), self.grad_enabled, None);
        if self.grad_enabled {
            if let Some(n) = name {
                self.inner.borrow_mut().bindings.push((t.id, n.to_string()));
            }
        }
        Ok(t)
    }

    /// Snapshot of a tensor's values (cheap: clones the `Arc`).
    pub fn values(&self, t: &Tensor) -> Arc<Vec<S>> {
        debug_assert_eq!(t.tape_id, self.id);
        Arc::clone(&self.inner.borrow().nodes[t.id].values)
    }

    pub fn values_f64(&self, t: &Tensor) -> Vec<f64> {
        self.values(t).iter().map(|v| v.as_f64()).collect()
    }

    pub fn value_scalar(&self, t: &Tensor) -> Result<S> {
        if t.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "value_scalar".into(),
                numel: t.numel(),
            });
        }
        Ok(self.inner.borrow().nodes[t.id].values[0])
    }

    /// Reverse pass from a scalar loss. Returns cotangents for every node
    /// that received one; leaves bound with a name are also keyed by name.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients<S>> {
        self.check_owned("backward", loss)?;
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward".into(),
                numel: loss.numel(),
            });
        }
        let inner = self.inner.borrow();
        let sizes: Vec<usize> = inner.nodes.iter().map(|n| n.values.len()).collect();
        let mut grads = GradBuf::new(sizes);
        grads.slots[loss.id] = Some(vec![S::one()]);
        let reader = NodeReader {
            nodes: &inner.nodes,
        };
        for id in (0..=loss.id).rev() {
            if grads.slots[id].is_none() {
                continue;
            }
            if let Some(step) = &inner.nodes[id].back {
                let d_out = grads.slots[id].take().expect("checked above");
                (step.run)(&d_out, &reader, &mut grads);
                grads.slots[id] = Some(d_out);
            }
        }
        let mut named: BTreeMap<String, Vec<S>> = BTreeMap::new();
        for (id, name) in &inner.bindings {
            if let Some(g) = &grads.slots[*id] {
                match named.get_mut(name) {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(g.iter()) {
                            *a = *a + v;
                        }
                    }
                    None => {
                        named.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            by_node: grads.slots,
            named,
        })
    }
}

/// Cotangents produced by one backward pass.
pub struct Gradients<S: Element> {
    tape_id: u64,
    by_node: Vec<Option<Vec<S>>>,
    named: BTreeMap<String, Vec<S>>,
}

impl<S: Element> Gradients<S> {
    /// Gradient w.r.t. a tensor, if any reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[S]> {
        if t.tape_id != self.tape_id {
            return None;
        }
        self.by_node.get(t.id).and_then(|g| g.as_deref())
    }

    pub fn named(&self) -> &BTreeMap<String, Vec<S>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Vec<S>> {
        self.named
    }
}

pub(crate) fn ensure_finite<S: Element>(op: &str, values: &[S]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            op: op.to_string(),
            context: String::new(),
        })
    }
}

#[cfg(test)]
mod tests;
