//! Projection head for self-distillation: a 3-layer MLP into an
//! L2-normalized bottleneck, followed by a weight-normalized prototype
//! layer (prototype rows are renormalized to unit length at every use).

use crate::init;
use crate::params::{Binding, ParamError, ParameterStore};
use crate::rng::StreamKey;
use crate::tensor::{Element, Tape, Tensor, TensorError};

pub fn register_head<S: Element>(
    store: &mut ParameterStore<S>,
    map_dim: usize,
    hidden: usize,
    bottleneck: usize,
    prototypes: usize,
    key: StreamKey,
) -> Result<(), ParamError> {
    let mut reg = |name: &str, shape: &[usize], zero: bool| -> Result<(), ParamError> {
        let full = format!("head.{name}");
        let values = if zero {
            init::zeros(shape)
        } else {
            init::glorot(key.child_str(&full), shape)
        };
        store.register(&full, values, shape)
    };
    reg("w1", &[map_dim, hidden], false)?;
    reg("bias1", &[hidden], true)?;
    reg("w2", &[hidden, hidden], false)?;
    reg("bias2", &[hidden], true)?;
    reg("w3", &[hidden, bottleneck], false)?;
    reg("bias3", &[bottleneck], true)?;
    reg("prototypes", &[prototypes, bottleneck], false)?;
    Ok(())
}

/// Map a summary vector to prototype logits.
pub fn head_forward<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    summary: &Tensor,
) -> Result<Tensor, HeadError> {
    let map_dim = summary.shape()[0];
    let x = tape.reshape(summary, &[1, map_dim])?;
    let lin = |x: &Tensor, w: &str, b: &str| -> Result<Tensor, HeadError> {
        let wt = binder.bind(tape, w)?;
        let bt = binder.bind(tape, b)?;
        Ok(tape.linear(x, &wt, Some(&bt))?)
    };
    let h1 = tape.gelu(&lin(&x, "head.w1", "head.bias1")?)?;
    let h2 = tape.gelu(&lin(&h1, "head.w2", "head.bias2")?)?;
    let z = lin(&h2, "head.w3", "head.bias3")?;
    let z = tape.l2_normalize(&z, 1)?;
    let protos = binder.bind(tape, "head.prototypes")?;
    let unit = tape.l2_normalize(&protos, 1)?;
    let wt = tape.transpose(&unit, &[1, 0])?;
    let logits = tape.matmul(&z, &wt)?;
    let n = logits.shape()[1];
    Ok(tape.reshape(&logits, &[n])?)
}

#[derive(thiserror::Error, Debug)]
pub enum HeadError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_shape_and_unit_prototypes() {
        let mut store = ParameterStore::<f64>::new();
        register_head(&mut store, 16, 8, 4, 10, StreamKey::root(3)).unwrap();
        let tape = Tape::<f64>::new();
        let mut rng = crate::rng::Rng::seeded(1);
        let s: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let summary = tape.constant(s, &[16]).unwrap();
        let logits = head_forward(&tape, &Binding::Frozen(&store), &summary).unwrap();
        assert_eq!(logits.shape(), &[10]);
        // effective prototype rows are unit norm, so |logit| <= |z| = 1
        assert!(tape.values(&logits).iter().all(|l| l.abs() <= 1.0 + 1e-9));
        let protos = store.bind_const(&tape, "head.prototypes").unwrap();
        let unit = tape.l2_normalize(&protos, 1).unwrap();
        let v = tape.values(&unit);
        for r in 0..10 {
            let norm: f64 = v[r * 4..(r + 1) * 4].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {r} norm {norm}");
        }
    }
}
