//! AdamW with decoupled weight decay, global gradient clipping, and the
//! cosine/linear schedules used by the training loop.

use std::collections::BTreeMap;

use crate::params::ParameterStore;
use crate::tensor::Element;

pub struct AdamW<S: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

/// Weight decay skips biases, gains, rank<=1 tensors, the positional
/// table, and sampler distribution parameters (the barrier gives those
/// zero gradient, so decay would only drag them toward zero).
pub fn decay_applies(name: &str, rank: usize) -> bool {
    if rank <= 1 || name.contains(".sampler.") {
        return false;
    }
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last.contains("bias") || last.contains("gain") || last == "pos")
}

impl<S: Element> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore<S>, lr: f64) {
        self.t += 1;
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let one = S::one();
        let eps = S::of_f64(self.eps);
        let bc1 = S::of_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let bc2 = S::of_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr_s = S::of_f64(lr);
        let wd = S::of_f64(self.weight_decay);
        for (name, p) in store.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); p.numel()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); p.numel()]);
            let decay = decay_applies(name, p.shape.len());
            let values = std::sync::Arc::make_mut(&mut p.value);
            for i in 0..values.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] * bc1;
                let v_hat = v[i] * bc2;
                let mut delta = m_hat / (v_hat.sqrt() + eps);
                if decay {
                    delta = delta + wd * values[i];
                }
                values[i] = values[i] - lr_s * delta;
            }
        }
    }

    /// Export optimizer moments for checkpointing.
    pub fn export(&self) -> (&BTreeMap<String, Vec<S>>, &BTreeMap<String, Vec<S>>, u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(
        weight_decay: f64,
        m: BTreeMap<String, Vec<S>>,
        v: BTreeMap<String, Vec<S>>,
        t: u64,
    ) -> Self {
        AdamW {
            t,
            m,
            v,
            ..AdamW::new(weight_decay)
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<S: Element>(store: &mut ParameterStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::of_f64(max_norm / norm);
        for (_, p) in store.iter_mut() {
            for g in p.grad.iter_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}

/// Cosine interpolation from `start` to `end` over `total` steps.
pub fn cosine_schedule(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return end;
    }
    let x = step as f64 / total as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Linear ramp from `start` to `end` over `warmup` steps, then flat.
pub fn linear_warmup(start: f64, end: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        return end;
    }
    start + (end - start) * step as f64 / warmup as f64
}

/// Learning rate: linear warmup from 0, then cosine decay to `lr_min`.
pub fn lr_schedule(lr: f64, lr_min: f64, warmup_frac: f64, step: u64, total: u64) -> f64 {
    let warmup = ((total as f64) * warmup_frac).round() as u64;
    if step < warmup {
        return linear_warmup(0.0, lr, step, warmup);
    }
    cosine_schedule(lr, lr_min, step - warmup, total.saturating_sub(warmup))
}
