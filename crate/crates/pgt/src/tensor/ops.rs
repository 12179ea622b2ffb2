//! Differentiable operations recorded on a [`Tape`].

use super::kernels::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, strides};
use super::{Element, Result, Tape, Tensor, TensorError};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Epsilon guarding division-by-sum normalizations.
pub const SUM_NORM_EPS: f64 = 1e-8;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: op.into(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &str, rank: usize, axis: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::BadAxis {
            op: op.into(),
            axis,
            rank,
        });
    }
    Ok(())
}

/// Split a shape at `axis` into (outer, len, inner) extents.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Element> Tape<S> {
    // ── elementwise binary ───────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned("add", a)?;
        self.check_owned("add", b)?;
        same_shape("add", a, b)?;
        let (av, bv) = (self.values(a), self.values(b));
        let out: Vec<S> = av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (aid, bid) = (a.id, b.id);
        self.emit("add", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, _r, g| {
                g.add(aid, d);
                g.add(bid, d);
            })
        })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned("sub", a)?;
        self.check_owned("sub", b)?;
        same_shape("sub", a, b)?;
        let (av, bv) = (self.values(a), self.values(b));
        let out: Vec<S> = av.iter().zip(bv.iter()).map(|(&x, &y)| x - y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (aid, bid) = (a.id, b.id);
        self.emit("sub", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, _r, g| {
                g.add(aid, d);
                g.add_weighted(bid, d, S::one().neg());
            })
        })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned("mul", a)?;
        self.check_owned("mul", b)?;
        same_shape("mul", a, b)?;
        let (av, bv) = (self.values(a), self.values(b));
        let out: Vec<S> = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (aid, bid) = (a.id, b.id);
        self.emit("mul", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                {
                    let bv = r.vals(bid);
                    let s = g.slot(aid);
                    for i in 0..d.len() {
                        s[i] = s[i] + d[i] * bv[i];
                    }
                }
                let av = r.vals(aid);
                let s = g.slot(bid);
                for i in 0..d.len() {
                    s[i] = s[i] + d[i] * av[i];
                }
            })
        })
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned("div", a)?;
        self.check_owned("div", b)?;
        same_shape("div", a, b)?;
        let (av, bv) = (self.values(a), self.values(b));
        let out: Vec<S> = av.iter().zip(bv.iter()).map(|(&x, &y)| x / y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (aid, bid) = (a.id, b.id);
        let out_id = self.next_id();
        self.emit("div", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                {
                    let bv = r.vals(bid);
                    let s = g.slot(aid);
                    for i in 0..d.len() {
                        s[i] = s[i] + d[i] / bv[i];
                    }
                }
                let (bv, yv) = (r.vals(bid), r.vals(out_id));
                let s = g.slot(bid);
                for i in 0..d.len() {
                    s[i] = s[i] - d[i] * yv[i] / bv[i];
                }
            })
        })
    }

    // ── elementwise unary ────────────────────────────────────────────

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.mul_scalar(a, S::one().neg())
    }

    pub fn add_scalar(&self, a: &Tensor, c: S) -> Result<Tensor> {
        self.check_owned("add_scalar", a)?;
        let out: Vec<S> = self.values(a).iter().map(|&x| x + c).collect();
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("add_scalar", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, _r, g| g.add(aid, d))
        })
    }

    pub fn mul_scalar(&self, a: &Tensor, c: S) -> Result<Tensor> {
        self.check_owned("mul_scalar", a)?;
        let out: Vec<S> = self.values(a).iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("mul_scalar", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, _r, g| g.add_weighted(aid, d, c))
        })
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("exp", a)?;
        let out: Vec<S> = self.values(a).iter().map(|&x| x.exp()).collect();
        let rg = self.requires_grad(a);
        let (aid, out_id) = (a.id, self.next_id());
        self.emit("exp", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let y = r.vals(out_id);
                let s = g.slot(aid);
                for i in 0..d.len() {
                    s[i] = s[i] + d[i] * y[i];
                }
            })
        })
    }

    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("ln", a)?;
        let out: Vec<S> = self.values(a).iter().map(|&x| x.ln()).collect();
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("ln", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let x = r.vals(aid);
                let s = g.slot(aid);
                for i in 0..d.len() {
                    s[i] = s[i] + d[i] / x[i];
                }
            })
        })
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("sigmoid", a)?;
        let one = S::one();
        let out: Vec<S> = self
            .values(a)
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let rg = self.requires_grad(a);
        let (aid, out_id) = (a.id, self.next_id());
        self.emit("sigmoid", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let y = r.vals(out_id);
                let s = g.slot(aid);
                let one = S::one();
                for i in 0..d.len() {
                    s[i] = s[i] + d[i] * y[i] * (one - y[i]);
                }
            })
        })
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("tanh", a)?;
        let out: Vec<S> = self.values(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.requires_grad(a);
        let (aid, out_id) = (a.id, self.next_id());
        self.emit("tanh", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let y = r.vals(out_id);
                let s = g.slot(aid);
                let one = S::one();
                for i in 0..d.len() {
                    s[i] = s[i] + d[i] * (one - y[i] * y[i]);
                }
            })
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("gelu", a)?;
        let c = S::of_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::of_f64(0.044715);
        let half = S::of_f64(0.5);
        let one = S::one();
        let out: Vec<S> = self
            .values(a)
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (one + u.tanh())
            })
            .collect();
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("gelu", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let x = r.vals(aid);
                let s = g.slot(aid);
                let three = S::of_f64(3.0);
                for i in 0..d.len() {
                    let xi = x[i];
                    let u = c * (xi + k * xi * xi * xi);
                    let t = u.tanh();
                    let sech2 = one - t * t;
                    let du = c * (one + three * k * xi * xi);
                    let grad = half * (one + t) + half * xi * sech2 * du;
                    s[i] = s[i] + d[i] * grad;
                }
            })
        })
    }

    /// Clamp to [lo, hi]; gradient passes through inside the interval.
    pub fn clamp(&self, a: &Tensor, lo: S, hi: S) -> Result<Tensor> {
        self.check_owned("clamp", a)?;
        let out: Vec<S> = self
            .values(a)
            .iter()
            .map(|&x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            })
            .collect();
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("clamp", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let x = r.vals(aid);
                let s = g.slot(aid);
                for i in 0..d.len() {
                    if x[i] >= lo && x[i] <= hi {
                        s[i] = s[i] + d[i];
                    }
                }
            })
        })
    }

    // ── structure ────────────────────────────────────────────────────

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check_owned("reshape", a)?;
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape".into(),
                shape: shape.to_vec(),
                reason: format!("element count {} != {}", n, a.numel()),
            });
        }
        let rg = self.requires_grad(a);
        let aid = a.id;
        Ok(self.emit_shared(self.values(a), shape.to_vec(), rg, || {
            Box::new(move |d, _r, g| g.add(aid, d))
        }))
    }

    pub fn transpose(&self, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.check_owned("transpose", a)?;
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "transpose".into(),
                shape: perm.to_vec(),
                reason: format!("not a permutation of rank {rank}"),
            });
        }
        let src_shape = a.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let out = permute(&self.values(a), &src_shape, perm);
        let rg = self.requires_grad(a);
        let aid = a.id;
        let inv: Vec<usize> = {
            let mut inv = vec![0usize; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let out_shape_back = out_shape.clone();
        self.emit("transpose", out, out_shape, rg, || {
            Box::new(move |d, _r, g| {
                let back = permute(d, &out_shape_back, &inv);
                g.add(aid, &back);
            })
        })
    }

    /// Explicit broadcast: shape is aligned right; source extents must be 1
    /// or equal. There is no implicit broadcasting anywhere else.
    pub fn broadcast_to(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check_owned("broadcast_to", a)?;
        let src = a.shape();
        if src.len() > shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to".into(),
                left: src.to_vec(),
                right: shape.to_vec(),
            });
        }
        let offset = shape.len() - src.len();
        for (i, &s) in src.iter().enumerate() {
            if s != shape[offset + i] && s != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to".into(),
                    left: src.to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        if src == shape {
            let rg = self.requires_grad(a);
            let aid = a.id;
            return Ok(self.emit_shared(self.values(a), shape.to_vec(), rg, || {
                Box::new(move |d, _r, g| g.add(aid, d))
            }));
        }
        // Source strides in the target frame; 0 where broadcast.
        let sstr = strides(src);
        let mut tstr = vec![0usize; shape.len()];
        for (i, &s) in src.iter().enumerate() {
            tstr[offset + i] = if s == 1 { 0 } else { sstr[i] };
        }
        let av = self.values(a);
        let n: usize = shape.iter().product();
        let mut out = vec![S::zero(); n];
        let mut idx = vec![0usize; shape.len()];
        let mut src_off = 0usize;
        for o in out.iter_mut() {
            *o = av[src_off];
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                src_off += tstr[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                src_off -= tstr[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        let rg = self.requires_grad(a);
        let aid = a.id;
        let shape_back = shape.to_vec();
        self.emit("broadcast_to", out, shape.to_vec(), rg, || {
            Box::new(move |d, _r, g| {
                let s = g.slot(aid);
                let mut idx = vec![0usize; shape_back.len()];
                let mut src_off = 0usize;
                for &dv in d.iter() {
                    s[src_off] = s[src_off] + dv;
                    for ax in (0..shape_back.len()).rev() {
                        idx[ax] += 1;
                        src_off += tstr[ax];
                        if idx[ax] < shape_back[ax] {
                            break;
                        }
                        src_off -= tstr[ax] * shape_back[ax];
                        idx[ax] = 0;
                    }
                }
            })
        })
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat".into(),
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        for p in parts {
            self.check_owned("concat", p)?;
        }
        let rank = parts[0].rank();
        check_axis("concat", rank, axis)?;
        for p in &parts[1..] {
            if p.rank() != rank
                || p.shape()
                    .iter()
                    .zip(parts[0].shape().iter())
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat".into(),
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = split3(&out_shape, axis);
        let total_axis = out_shape[axis];
        let mut out = vec![S::zero(); out_shape.iter().product()];
        let mut base = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let pa = p.shape()[axis];
            let pv = self.values(p);
            for o in 0..outer {
                let dst = (o * total_axis + base) * inner;
                let src = o * pa * inner;
                out[dst..dst + pa * inner].copy_from_slice(&pv[src..src + pa * inner]);
            }
            spans.push((p.id, base, pa));
            base += pa;
        }
        let rg = parts.iter().any(|p| self.requires_grad(p));
        self.emit("concat", out, out_shape, rg, || {
            Box::new(move |d, _r, g| {
                for &(pid, start, pa) in &spans {
                    let s = g.slot(pid);
                    for o in 0..outer {
                        let src = (o * total_axis + start) * inner;
                        let dst = o * pa * inner;
                        for i in 0..pa * inner {
                            s[dst + i] = s[dst + i] + d[src + i];
                        }
                    }
                }
            })
        })
    }

    pub fn narrow(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_owned("narrow", a)?;
        check_axis("narrow", a.rank(), axis)?;
        let (outer, n, inner) = split3(a.shape(), axis);
        if start + len > n {
            return Err(TensorError::InvalidShape {
                op: "narrow".into(),
                shape: a.shape().to_vec(),
                reason: format!("slice {start}..{} exceeds axis extent {n}", start + len),
            });
        }
        let av = self.values(a);
        let mut out_shape = a.shape().to_vec();
        out_shape[axis] = len;
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * n + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&av[src..src + len * inner]);
        }
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("narrow", out, out_shape, rg, || {
            Box::new(move |d, _r, g| {
                let s = g.slot(aid);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        s[dst + i] = s[dst + i] + d[src + i];
                    }
                }
            })
        })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn reduce_sum(&self, a: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce(a, axis, keepdim, false)
    }

    pub fn reduce_mean(&self, a: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.reduce(a, axis, keepdim, true)
    }

    fn reduce(&self, a: &Tensor, axis: usize, keepdim: bool, mean: bool) -> Result<Tensor> {
        let op = if mean { "reduce_mean" } else { "reduce_sum" };
        self.check_owned(op, a)?;
        check_axis(op, a.rank(), axis)?;
        let (outer, n, inner) = split3(a.shape(), axis);
        let scale = if mean {
            S::of_f64(1.0 / n as f64)
        } else {
            S::one()
        };
        let av = self.values(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let src = (o * n + t) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] = out[dst + i] + av[src + i];
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v = *v * scale;
            }
        }
        let mut out_shape: Vec<usize> = a.shape().to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit(op, out, out_shape, rg, || {
            Box::new(move |d, _r, g| {
                let s = g.slot(aid);
                for o in 0..outer {
                    for t in 0..n {
                        let dst = (o * n + t) * inner;
                        let src = o * inner;
                        for i in 0..inner {
                            s[dst + i] = s[dst + i] + d[src + i] * scale;
                        }
                    }
                }
            })
        })
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("sum_all", a)?;
        let total = self
            .values(a)
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("sum_all", vec![total], vec![1], rg, || {
            Box::new(move |d, _r, g| {
                let w = d[0];
                let s = g.slot(aid);
                for v in s.iter_mut() {
                    *v = *v + w;
                }
            })
        })
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        let s = self.sum_all(a)?;
        self.mul_scalar(&s, S::of_f64(1.0 / n as f64))
    }

    // ── normalizations ───────────────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_owned("softmax", a)?;
        check_axis("softmax", a.rank(), axis)?;
        let (outer, n, inner) = split3(a.shape(), axis);
        let av = self.values(a);
        let mut out = vec![S::zero(); av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                let mut m = av[at(0)];
                for t in 1..n {
                    if av[at(t)] > m {
                        m = av[at(t)];
                    }
                }
                let mut z = S::zero();
                for t in 0..n {
                    let e = (av[at(t)] - m).exp();
                    out[at(t)] = e;
                    z = z + e;
                }
                for t in 0..n {
                    out[at(t)] = out[at(t)] / z;
                }
            }
        }
        let rg = self.requires_grad(a);
        let (aid, out_id) = (a.id, self.next_id());
        self.emit("softmax", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let y = r.vals(out_id);
                let s = g.slot(aid);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + i;
                        let mut dot = S::zero();
                        for t in 0..n {
                            dot = dot + d[at(t)] * y[at(t)];
                        }
                        for t in 0..n {
                            s[at(t)] = s[at(t)] + y[at(t)] * (d[at(t)] - dot);
                        }
                    }
                }
            })
        })
    }

    /// Log-softmax along `axis` (stable log-sum-exp form).
    pub fn log_softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_owned("log_softmax", a)?;
        check_axis("log_softmax", a.rank(), axis)?;
        let (outer, n, inner) = split3(a.shape(), axis);
        let av = self.values(a);
        let mut out = vec![S::zero(); av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                let mut m = av[at(0)];
                for t in 1..n {
                    if av[at(t)] > m {
                        m = av[at(t)];
                    }
                }
                let mut z = S::zero();
                for t in 0..n {
                    z = z + (av[at(t)] - m).exp();
                }
                let lse = m + z.ln();
                for t in 0..n {
                    out[at(t)] = av[at(t)] - lse;
                }
            }
        }
        let rg = self.requires_grad(a);
        let (aid, out_id) = (a.id, self.next_id());
        self.emit("log_softmax", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let y = r.vals(out_id);
                let s = g.slot(aid);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + i;
                        let mut sum_d = S::zero();
                        for t in 0..n {
                            sum_d = sum_d + d[at(t)];
                        }
                        for t in 0..n {
                            s[at(t)] = s[at(t)] + d[at(t)] - y[at(t)].exp() * sum_d;
                        }
                    }
                }
            })
        })
    }

    /// Zero-mean, unit-variance normalization along the last axis
    /// (the layer-norm core, before the affine transform).
    pub fn standardize(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("standardize", a)?;
        if a.rank() == 0 {
            return Err(TensorError::InvalidShape {
                op: "standardize".into(),
                shape: a.shape().to_vec(),
                reason: "rank 0".into(),
            });
        }
        let n = *a.shape().last().expect("rank checked");
        let rows = a.numel() / n;
        let eps = S::of_f64(LAYER_NORM_EPS);
        let inv_n = S::of_f64(1.0 / n as f64);
        let av = self.values(a);
        let mut out = vec![S::zero(); av.len()];
        let mut invs = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &av[r * n..(r + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = S::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_n;
            let inv = S::one() / (var + eps).sqrt();
            invs[r] = inv;
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
        }
        let rg = self.requires_grad(a);
        let (aid, out_id) = (a.id, self.next_id());
        self.emit("standardize", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let y = r.vals(out_id);
                let s = g.slot(aid);
                for row in 0..rows {
                    let base = row * n;
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for t in 0..n {
                        m1 = m1 + d[base + t];
                        m2 = m2 + d[base + t] * y[base + t];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    let inv = invs[row];
                    for t in 0..n {
                        s[base + t] =
                            s[base + t] + inv * (d[base + t] - m1 - y[base + t] * m2);
                    }
                }
            })
        })
    }

    /// Layer norm over the last axis with affine gain/bias of that extent.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let last = *x.shape().last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm".into(),
            shape: x.shape().to_vec(),
            reason: "rank 0".into(),
        })?;
        for (t, role) in [(gain, "gain"), (bias, "bias")] {
            if t.shape() != [last] {
                return Err(TensorError::ShapeMismatch {
                    op: format!("layer_norm {role}"),
                    left: t.shape().to_vec(),
                    right: vec![last],
                });
            }
        }
        let y = self.standardize(x)?;
        let gb = self.broadcast_to(gain, x.shape())?;
        let bb = self.broadcast_to(bias, x.shape())?;
        let scaled = self.mul(&y, &gb)?;
        self.add(&scaled, &bb)
    }

    /// L2 normalization along `axis`: x / sqrt(sum(x^2) + eps).
    pub fn l2_normalize(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_owned("l2_normalize", a)?;
        check_axis("l2_normalize", a.rank(), axis)?;
        let (outer, n, inner) = split3(a.shape(), axis);
        let eps = S::of_f64(SUM_NORM_EPS);
        let av = self.values(a);
        let mut out = vec![S::zero(); av.len()];
        let mut invs = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                let mut n2 = eps;
                for t in 0..n {
                    n2 = n2 + av[at(t)] * av[at(t)];
                }
                let inv = S::one() / n2.sqrt();
                invs[o * inner + i] = inv;
                for t in 0..n {
                    out[at(t)] = av[at(t)] * inv;
                }
            }
        }
        let rg = self.requires_grad(a);
        let aid = a.id;
        self.emit("l2_normalize", out, a.shape().to_vec(), rg, || {
            Box::new(move |d, r, g| {
                let x = r.vals(aid);
                let s = g.slot(aid);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + i;
                        let inv = invs[o * inner + i];
                        let inv3 = inv * inv * inv;
                        let mut dot = S::zero();
                        for t in 0..n {
                            dot = dot + d[at(t)] * x[at(t)];
                        }
                        for t in 0..n {
                            s[at(t)] = s[at(t)] + d[at(t)] * inv - x[at(t)] * dot * inv3;
                        }
                    }
                }
            })
        })
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Batched matrix product. Trailing two axes multiply; leading batch
    /// axes broadcast (extent 1 or missing expands).
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned("matmul", a)?;
        self.check_owned("matmul", b)?;
        if a.rank() < 2 || b.rank() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul".into(),
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (p, q) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (q2, rdim) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul".into(),
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let a_batch = &a.shape()[..a.rank() - 2];
        let b_batch = &b.shape()[..b.rank() - 2];
        let (out_batch, a_map, b_map) = broadcast_batch("matmul", a_batch, b_batch)?;
        let batch_n: usize = out_batch.iter().product();
        let (ablk, bblk, oblk) = (p * q, q * rdim, p * rdim);
        let (av, bv) = (self.values(a), self.values(b));
        let mut out = vec![S::zero(); batch_n * oblk];
        for t in 0..batch_n {
            let (ai, bi) = (a_map.resolve(t, &out_batch), b_map.resolve(t, &out_batch));
            matmul_nn_acc(
                &av[ai * ablk..(ai + 1) * ablk],
                &bv[bi * bblk..(bi + 1) * bblk],
                &mut out[t * oblk..(t + 1) * oblk],
                p,
                q,
                rdim,
            );
        }
        let mut out_shape = out_batch.clone();
        out_shape.extend_from_slice(&[p, rdim]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (aid, bid) = (a.id, b.id);
        self.emit("matmul", out, out_shape, rg, || {
            Box::new(move |d, r, g| {
                {
                    let bv = r.vals(bid);
                    let s = g.slot(aid);
                    for t in 0..batch_n {
                        let (ai, bi) =
                            (a_map.resolve(t, &out_batch), b_map.resolve(t, &out_batch));
                        matmul_nt_acc(
                            &d[t * oblk..(t + 1) * oblk],
                            &bv[bi * bblk..(bi + 1) * bblk],
                            &mut s[ai * ablk..(ai + 1) * ablk],
                            p,
                            rdim,
                            q,
                        );
                    }
                }
                let av = r.vals(aid);
                let s = g.slot(bid);
                for t in 0..batch_n {
                    let (ai, bi) = (a_map.resolve(t, &out_batch), b_map.resolve(t, &out_batch));
                    matmul_tn_acc(
                        &av[ai * ablk..(ai + 1) * ablk],
                        &d[t * oblk..(t + 1) * oblk],
                        &mut s[bi * bblk..(bi + 1) * bblk],
                        p,
                        q,
                        rdim,
                    );
                }
            })
        })
    }

    /// x @ w (+ bias broadcast over leading axes).
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(&y, b),
            None => Ok(y),
        }
    }

    /// Add a bias whose shape matches the trailing axes of `x`.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let b = self.broadcast_to(bias, x.shape())?;
        self.add(x, &b)
    }

    /// Two-operand contraction with named axes, e.g. `"hij,hid->hjd"`.
    ///
    /// Letters shared by both inputs and the output are batch axes; letters
    /// shared by the inputs only are contracted; every remaining letter must
    /// appear in the output. Implemented as transpose/reshape around a
    /// batched matrix product, so it differentiates like any composite.
    pub fn contract(&self, spec: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let plan = ContractPlan::parse(spec, a.shape(), b.shape())?;
        let at = self.transpose(a, &plan.a_perm)?;
        let bt = self.transpose(b, &plan.b_perm)?;
        let a3 = self.reshape(&at, &[plan.batch_n, plan.a_free_n, plan.contract_n])?;
        let b3 = self.reshape(&bt, &[plan.batch_n, plan.contract_n, plan.b_free_n])?;
        let prod = self.matmul(&a3, &b3)?;
        let mid = self.reshape(&prod, &plan.mid_shape)?;
        self.transpose(&mid, &plan.out_perm)
    }

    /// Identity forward; the backward pass propagates exactly zero into the
    /// input (the tape treats the result as a constant).
    pub fn gradient_barrier(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("gradient_barrier", a)?;
        Ok(self.emit_shared(self.values(a), a.shape().to_vec(), false, || {
            unreachable!("barrier output never requires grad")
        }))
    }
}

fn permute<S: Element>(src: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    if src.is_empty() {
        return Vec::new();
    }
    let sstr = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let pstr: Vec<usize> = perm.iter().map(|&p| sstr[p]).collect();
    let mut out = vec![src[0]; src.len()];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for o in out.iter_mut() {
        *o = src[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += pstr[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= pstr[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Maps a flat broadcast-batch index back to an operand's block index.
#[derive(Clone)]
struct BatchResolver {
    // stride (in blocks) for each out-batch axis; 0 where broadcast
    strides: Vec<usize>,
}

impl BatchResolver {
    fn resolve(&self, mut flat: usize, out_batch: &[usize]) -> usize {
        let mut off = 0;
        for ax in (0..out_batch.len()).rev() {
            let i = flat % out_batch[ax];
            flat /= out_batch[ax];
            off += i * self.strides[ax];
        }
        off
    }
}

fn broadcast_batch(
    op: &str,
    a_batch: &[usize],
    b_batch: &[usize],
) -> Result<(Vec<usize>, BatchResolver, BatchResolver)> {
    let rank = a_batch.len().max(b_batch.len());
    let mut out = vec![0usize; rank];
    for k in 0..rank {
        let ad = dim_right(a_batch, rank, k);
        let bd = dim_right(b_batch, rank, k);
        let m = ad.max(bd);
        if (ad != m && ad != 1) || (bd != m && bd != 1) {
            return Err(TensorError::ShapeMismatch {
                op: op.into(),
                left: a_batch.to_vec(),
                right: b_batch.to_vec(),
            });
        }
        out[k] = m;
    }
    let make = |batch: &[usize]| {
        let s = strides(batch);
        let offset = rank - batch.len();
        let mut st = vec![0usize; rank];
        for (i, &d) in batch.iter().enumerate() {
            st[offset + i] = if d == 1 { 0 } else { s[i] };
        }
        BatchResolver { strides: st }
    };
    Ok((out.clone(), make(a_batch), make(b_batch)))
}

fn dim_right(shape: &[usize], rank: usize, k: usize) -> usize {
    let offset = rank - shape.len();
    if k < offset {
        1
    } else {
        shape[k - offset]
    }
}

struct ContractPlan {
    a_perm: Vec<usize>,
    b_perm: Vec<usize>,
    batch_n: usize,
    a_free_n: usize,
    b_free_n: usize,
    contract_n: usize,
    mid_shape: Vec<usize>,
    out_perm: Vec<usize>,
}

impl ContractPlan {
    fn parse(spec: &str, a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        let bad = |reason: &str| TensorError::BadContraction {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let (lhs, out_s) = spec.split_once("->").ok_or_else(|| bad("missing '->'"))?;
        let (a_s, b_s) = lhs.split_once(',').ok_or_else(|| bad("need two inputs"))?;
        let a_l: Vec<char> = a_s.chars().collect();
        let b_l: Vec<char> = b_s.chars().collect();
        let o_l: Vec<char> = out_s.chars().collect();
        if a_l.len() != a_shape.len() || b_l.len() != b_shape.len() {
            return Err(bad("operand rank does not match axis letters"));
        }
        for ls in [&a_l, &b_l, &o_l] {
            let mut seen = std::collections::HashSet::new();
            if ls.iter().any(|c| !seen.insert(*c)) {
                return Err(bad("repeated letter within one term"));
            }
        }
        let mut extent = std::collections::HashMap::new();
        for (c, &e) in a_l.iter().zip(a_shape).chain(b_l.iter().zip(b_shape)) {
            if *extent.entry(*c).or_insert(e) != e {
                return Err(bad("inconsistent extents for a letter"));
            }
        }
        let in_a = |c: &char| a_l.contains(c);
        let in_b = |c: &char| b_l.contains(c);
        let in_o = |c: &char| o_l.contains(c);
        let batch: Vec<char> = o_l
            .iter()
            .copied()
            .filter(|c| in_a(c) && in_b(c))
            .collect();
        let contracted: Vec<char> = a_l
            .iter()
            .copied()
            .filter(|c| in_b(c) && !in_o(c))
            .collect();
        let a_free: Vec<char> = o_l
            .iter()
            .copied()
            .filter(|c| in_a(c) && !in_b(c))
            .collect();
        let b_free: Vec<char> = o_l
            .iter()
            .copied()
            .filter(|c| in_b(c) && !in_a(c))
            .collect();
        for c in &a_l {
            if !in_b(c) && !in_o(c) {
                return Err(bad("input letter absent from output (reduction unsupported)"));
            }
        }
        for c in &b_l {
            if !in_a(c) && !in_o(c) {
                return Err(bad("input letter absent from output (reduction unsupported)"));
            }
        }
        for c in &o_l {
            if !in_a(c) && !in_b(c) {
                return Err(bad("output letter missing from inputs"));
            }
        }
        let pos = |ls: &[char], c: char| ls.iter().position(|&x| x == c).expect("validated");
        let a_perm: Vec<usize> = batch
            .iter()
            .chain(a_free.iter())
            .chain(contracted.iter())
            .map(|&c| pos(&a_l, c))
            .collect();
        let b_perm: Vec<usize> = batch
            .iter()
            .chain(contracted.iter())
            .chain(b_free.iter())
            .map(|&c| pos(&b_l, c))
            .collect();
        let ext = |c: &char| extent[c];
        let batch_n: usize = batch.iter().map(ext).product();
        let a_free_n: usize = a_free.iter().map(ext).product();
        let b_free_n: usize = b_free.iter().map(ext).product();
        let contract_n: usize = contracted.iter().map(ext).product();
        let mid_letters: Vec<char> = batch
            .iter()
            .chain(a_free.iter())
            .chain(b_free.iter())
            .copied()
            .collect();
        let mid_shape: Vec<usize> = mid_letters.iter().map(|c| extent[c]).collect();
        let out_perm: Vec<usize> = o_l.iter().map(|&c| pos(&mid_letters, c)).collect();
        Ok(ContractPlan {
            a_perm,
            b_perm,
            batch_n,
            a_free_n,
            b_free_n,
            contract_n,
            mid_shape,
            out_perm,
        })
    }
}
