//! Parameter initializers. Every tensor is seeded from a stream keyed by
//! its own name, so initialization is independent of registration order.

use crate::rng::StreamKey;
use crate::tensor::Element;

/// Glorot-normal for weight matrices: std = sqrt(2 / (fan_in + fan_out)),
/// fans taken from the trailing two axes (leading axes are per-head batch).
pub fn glorot<S: Element>(key: StreamKey, shape: &[usize]) -> Vec<S> {
    let (fan_in, fan_out) = match shape.len() {
        0 | 1 => (1, shape.iter().product::<usize>().max(1)),
        n => (shape[n - 2], shape[n - 1]),
    };
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(key, shape, std)
}

pub fn normal<S: Element>(key: StreamKey, shape: &[usize], std: f64) -> Vec<S> {
    let mut rng = key.rng();
    (0..shape.iter().product())
        .map(|_| S::of_f64(rng.normal() * std))
        .collect()
}

pub fn zeros<S: Element>(shape: &[usize]) -> Vec<S> {
    vec![S::zero(); shape.iter().product()]
}

pub fn ones<S: Element>(shape: &[usize]) -> Vec<S> {
    vec![S::one(); shape.iter().product()]
}

pub fn full<S: Element>(shape: &[usize], v: f64) -> Vec<S> {
    vec![S::of_f64(v); shape.iter().product()]
}
