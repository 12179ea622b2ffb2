//! Named parameter storage, gradient accumulators, and the checkpoint format.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{Dtype, Element, Tape, Tensor};

#[derive(Error, Debug)]
pub enum ParamError {
    #[error("parameter '{0}' already registered")]
    Duplicate(String),
    #[error("unknown parameter '{0}'")]
    Unknown(String),
    #[error("parameter '{name}': {expected} values expected, got {got}")]
    LengthMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub struct Param<S: Element> {
    pub value: Arc<Vec<S>>,
    pub shape: Vec<usize>,
    pub grad: Vec<S>,
}

impl<S: Element> Param<S> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Map from hierarchical dot-separated names to tensors, each paired with a
/// gradient accumulator of identical shape.
#[derive(Default)]
pub struct ParameterStore<S: Element> {
    entries: BTreeMap<String, Param<S>>,
}

impl<S: Element> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        values: Vec<S>,
        shape: &[usize],
    ) -> Result<(), ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(ParamError::LengthMismatch {
                name: name.to_string(),
                expected,
                got: values.len(),
            });
        }
        let grad = vec![S::zero(); values.len()];
        self.entries.insert(
            name.to_string(),
            Param {
                value: Arc::new(values),
                shape: shape.to_vec(),
                grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>, ParamError> {
        self.entries
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Bind as a differentiable leaf; gradients come back under this name.
    pub fn bind(&self, tape: &Tape<S>, name: &str) -> Result<Tensor, ParamError> {
        let p = self.get(name)?;
        Ok(tape.leaf(Arc::clone(&p.value), &p.shape, Some(name))?)
    }

    /// Bind as a constant: no gradient ever flows to it.
    pub fn bind_const(&self, tape: &Tape<S>, name: &str) -> Result<Tensor, ParamError> {
        let p = self.get(name)?;
        Ok(tape.constant_shared(Arc::clone(&p.value), &p.shape)?)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.iter_mut() {
                *g = S::zero();
            }
        }
    }

    /// Accumulate named gradients scaled by `weight`. Names absent from the
    /// map contribute zero. Serialized merge step: callers hold `&mut self`.
    pub fn accumulate(
        &mut self,
        named: &BTreeMap<String, Vec<S>>,
        weight: S,
    ) -> Result<(), ParamError> {
        for (name, g) in named {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            if g.len() != p.grad.len() {
                return Err(ParamError::LengthMismatch {
                    name: name.clone(),
                    expected: p.grad.len(),
                    got: g.len(),
                });
            }
            for (acc, &v) in p.grad.iter_mut().zip(g.iter()) {
                *acc = *acc + v * weight;
            }
        }
        Ok(())
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum()
    }

    /// Replace a parameter's values (shape unchanged).
    pub fn set_value(&mut self, name: &str, values: Vec<S>) -> Result<(), ParamError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if values.len() != p.numel() {
            return Err(ParamError::LengthMismatch {
                name: name.to_string(),
                expected: p.numel(),
                got: values.len(),
            });
        }
        p.value = Arc::new(values);
        Ok(())
    }

    /// Add `delta` to one coordinate (finite-difference probes).
    pub fn nudge(&mut self, name: &str, index: usize, delta: S) -> Result<(), ParamError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let vals = Arc::make_mut(&mut p.value);
        vals[index] = vals[index] + delta;
        Ok(())
    }

    /// Set one coordinate to an absolute value.
    pub fn set_value_at(&mut self, name: &str, index: usize, value: S) -> Result<(), ParamError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        Arc::make_mut(&mut p.value)[index] = value;
        Ok(())
    }

    /// theta <- m * theta + (1 - m) * other, entry-wise over shared names.
    pub fn ema_update_from(&mut self, other: &Self, m: S) -> Result<(), ParamError> {
        let one_minus = S::one() - m;
        for (name, p) in self.entries.iter_mut() {
            let src = other.get(name)?;
            let dst = Arc::make_mut(&mut p.value);
            for (d, &s) in dst.iter_mut().zip(src.value.iter()) {
                *d = *d * m + s * one_minus;
            }
        }
        Ok(())
    }

    /// Deep copy (same names, values, fresh zero grads).
    pub fn clone_values(&self) -> Self {
        let mut out = ParameterStore::new();
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Param {
                    value: Arc::new(p.value.as_ref().clone()),
                    shape: p.shape.clone(),
                    grad: vec![S::zero(); p.numel()],
                },
            );
        }
        out
    }

    pub fn total_parameters(&self) -> usize {
        self.entries.values().map(|p| p.numel()).sum()
    }
}

/// How model code binds parameters onto a tape: trainable leaves for the
/// student, constants for frozen evaluation (teacher, inference, probes).
#[derive(Clone, Copy)]
pub enum Binding<'a, S: Element> {
    Train(&'a ParameterStore<S>),
    Frozen(&'a ParameterStore<S>),
}

impl<'a, S: Element> Binding<'a, S> {
    pub fn store(&self) -> &'a ParameterStore<S> {
        match self {
            Binding::Train(s) | Binding::Frozen(s) => s,
        }
    }

    pub fn bind(&self, tape: &Tape<S>, name: &str) -> Result<Tensor, ParamError> {
        match self {
            Binding::Train(s) => s.bind(tape, name),
            Binding::Frozen(s) => s.bind_const(tape, name),
        }
    }
}

// ── checkpoint format ────────────────────────────────────────────────
//
// Layout: 8-byte magic "PGTCKPT1", then a u64 little-endian header length,
// then the UTF-8 header (one line per tensor: `name dtype d0,d1,...`,
// sorted by name), then raw little-endian values in header order.
// Round-trips are bit-exact for the stored dtype.

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PGTCKPT1";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("malformed header line: '{0}'")]
    BadHeader(String),
    #[error("tensor '{name}' has dtype {got}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        got: String,
    },
    #[error("file truncated while reading '{0}'")]
    Truncated(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// A flat bag of named tensors, the unit of persistence.
#[derive(Default)]
pub struct Checkpoint<S: Element> {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<S>)>,
}

impl<S: Element> Checkpoint<S> {
    pub fn new() -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<S>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.insert(name.to_string(), (shape, values));
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, vec![1], vec![S::of_f64(v)]);
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.tensors
            .get(name)
            .and_then(|(_, v)| v.first())
            .map(|v| v.as_f64())
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParameterStore<S>) {
        for (name, p) in store.iter() {
            self.insert(
                &format!("{prefix}.{name}"),
                p.shape.clone(),
                p.value.as_ref().clone(),
            );
        }
    }

    /// Rebuild a store from every tensor under `prefix.`.
    pub fn extract_store(&self, prefix: &str) -> Result<ParameterStore<S>, CheckpointError> {
        let mut store = ParameterStore::new();
        let want = format!("{prefix}.");
        for (name, (shape, values)) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&want) {
                store.register(rest, values.clone(), shape)?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut header = String::new();
        for (name, (shape, _)) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name} {} {}\n", S::DTYPE.name(), dims.join(",")));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for (_, (_, values)) in &self.tensors {
            for &v in values {
                v.write_le(&mut buf);
            }
        }
        // Atomic replace so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header = vec![0u8; header_len];
        file.read_exact(&mut header)?;
        let header = String::from_utf8(header)
            .map_err(|_| CheckpointError::BadHeader("non-utf8".into()))?;
        let mut entries = Vec::new();
        for line in header.lines() {
            let mut parts = line.split(' ');
            let (name, dtype, dims) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(d), Some(s)) if parts.next().is_none() => (n, d, s),
                _ => return Err(CheckpointError::BadHeader(line.to_string())),
            };
            let dtype = Dtype::parse(dtype)
                .ok_or_else(|| CheckpointError::BadHeader(line.to_string()))?;
            if dtype != S::DTYPE {
                return Err(CheckpointError::DtypeMismatch {
                    name: name.to_string(),
                    expected: S::DTYPE.name(),
                    got: dtype.name().to_string(),
                });
            }
            let shape: Vec<usize> = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CheckpointError::BadHeader(line.to_string()))?;
            entries.push((name.to_string(), shape));
        }
        let width = S::DTYPE.size_bytes();
        let mut out = Checkpoint::new();
        for (name, shape) in entries {
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * width];
            file.read_exact(&mut raw)
                .map_err(|_| CheckpointError::Truncated(name.clone()))?;
            let values: Vec<S> = raw.chunks_exact(width).map(S::read_le).collect();
            out.insert(&name, shape, values);
        }
        Ok(out)
    }
}

/// Convenience: persist a single store under a prefix.
pub fn save_store<S: Element>(
    path: &Path,
    prefix: &str,
    store: &ParameterStore<S>,
) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::new();
    ck.insert_store(prefix, store);
    ck.save(path)
}
