//! Learnable seed distributions for group-token initialization.
//!
//! Two variants, both stateless w.r.t. the input image: a Gaussian with
//! learnable per-head mean and (log-)scale, and a one-step affine coupling
//! flow that rescales and shifts a unit-Gaussian draw conditioned on the
//! draw itself. The number of sampled tokens is a free runtime argument:
//! noise is drawn token-major, so a longer sample extends a shorter one
//! with the same stream prefix.

use thiserror::Error;

use crate::init;
use crate::params::{Binding, ParamError, ParameterStore};
use crate::rng::{Rng, StreamKey};
use crate::tensor::{Element, Tape, Tensor, TensorError};

/// Clamp on log sigma before exponentiation.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-20.0, 2.0);
/// Clamp on the flow's log scale before exponentiation.
pub const LOG_SCALE_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Gaussian,
    Flow,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(SamplerKind::Gaussian),
            "flow" => Some(SamplerKind::Flow),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Gaussian => "gaussian",
            SamplerKind::Flow => "flow",
        }
    }
}

#[derive(Error, Debug)]
pub enum SamplerError {
    #[error("sample count must be at least 1")]
    ZeroTokens,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Register sampler parameters under `{prefix}.sampler.*`.
pub fn register<S: Element>(
    kind: SamplerKind,
    store: &mut ParameterStore<S>,
    prefix: &str,
    heads: usize,
    dim: usize,
    key: StreamKey,
) -> Result<(), ParamError> {
    let name = |suffix: &str| format!("{prefix}.sampler.{suffix}");
    let keyed = |suffix: &str| key.child_str(&name(suffix));
    match kind {
        SamplerKind::Gaussian => {
            store.register(
                &name("mu"),
                init::normal(keyed("mu"), &[heads, dim], 0.5),
                &[heads, dim],
            )?;
            store.register(&name("log_sigma"), init::zeros(&[heads, dim]), &[heads, dim])?;
        }
        SamplerKind::Flow => {
            store.register(&name("a"), init::ones(&[heads, dim]), &[heads, dim])?;
            store.register(&name("b"), init::zeros(&[heads, dim]), &[heads, dim])?;
            store.register(
                &name("mlp.w1"),
                init::glorot(keyed("mlp.w1"), &[heads, dim, dim]),
                &[heads, dim, dim],
            )?;
            store.register(&name("mlp.bias1"), init::zeros(&[heads, dim]), &[heads, dim])?;
            store.register(
                &name("mlp.w2"),
                init::glorot(keyed("mlp.w2"), &[heads, dim, 2 * dim]),
                &[heads, dim, 2 * dim],
            )?;
            store.register(
                &name("mlp.bias2"),
                init::zeros(&[heads, 2 * dim]),
                &[heads, 2 * dim],
            )?;
        }
    }
    Ok(())
}

/// Unit-Gaussian noise of shape [heads, n_tokens, dim], drawn token-major so
/// the first min(M, M') tokens agree for any two sample counts sharing a
/// stream prefix.
fn draw_noise<S: Element>(
    tape: &Tape<S>,
    heads: usize,
    n_tokens: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<Tensor, TensorError> {
    let mut eps = vec![S::zero(); heads * n_tokens * dim];
    for m in 0..n_tokens {
        for h in 0..heads {
            for k in 0..dim {
                eps[h * n_tokens * dim + m * dim + k] = S::of_f64(rng.normal());
            }
        }
    }
    tape.constant(eps, &[heads, n_tokens, dim])
}

/// Draw `n_tokens` seeds per head: mu + sigma * eps, eps ~ N(0, I).
pub fn sample_gaussian<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    prefix: &str,
    heads: usize,
    dim: usize,
    n_tokens: usize,
    rng: &mut Rng,
) -> Result<Tensor, SamplerError> {
    if n_tokens == 0 {
        return Err(SamplerError::ZeroTokens);
    }
    let mu = binder.bind(tape, &format!("{prefix}.sampler.mu"))?;
    let log_sigma = binder.bind(tape, &format!("{prefix}.sampler.log_sigma"))?;
    let eps = draw_noise(tape, heads, n_tokens, dim, rng)?;
    let shape = [heads, n_tokens, dim];
    let clamped = tape.clamp(
        &log_sigma,
        S::of_f64(LOG_SIGMA_RANGE.0),
        S::of_f64(LOG_SIGMA_RANGE.1),
    )?;
    let sigma = tape.exp(&clamped)?;
    let mu_b = {
        let r = tape.reshape(&mu, &[heads, 1, dim])?;
        tape.broadcast_to(&r, &shape)?
    };
    let sigma_b = {
        let r = tape.reshape(&sigma, &[heads, 1, dim])?;
        tape.broadcast_to(&r, &shape)?
    };
    let scaled = tape.mul(&sigma_b, &eps)?;
    Ok(tape.add(&mu_b, &scaled)?)
}

/// One-step affine coupling flow over the whole dimension:
/// c0 = a*eps + b; (log s, t) = MLP(c0); c = exp(log s)*c0 + t.
pub fn sample_flow<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    prefix: &str,
    heads: usize,
    dim: usize,
    n_tokens: usize,
    rng: &mut Rng,
) -> Result<Tensor, SamplerError> {
    if n_tokens == 0 {
        return Err(SamplerError::ZeroTokens);
    }
    let p = |s: &str| format!("{prefix}.sampler.{s}");
    let a = binder.bind(tape, &p("a"))?;
    let b = binder.bind(tape, &p("b"))?;
    let w1 = binder.bind(tape, &p("mlp.w1"))?;
    let b1 = binder.bind(tape, &p("mlp.bias1"))?;
    let w2 = binder.bind(tape, &p("mlp.w2"))?;
    let b2 = binder.bind(tape, &p("mlp.bias2"))?;
    let eps = draw_noise(tape, heads, n_tokens, dim, rng)?;
    let shape = [heads, n_tokens, dim];
    let bcast = |t: &Tensor, last: usize| -> Result<Tensor, TensorError> {
        let r = tape.reshape(t, &[heads, 1, last])?;
        tape.broadcast_to(&r, &[heads, n_tokens, last])
    };
    let c0 = {
        let scaled = tape.mul(&bcast(&a, dim)?, &eps)?;
        tape.add(&scaled, &bcast(&b, dim)?)?
    };
    debug_assert_eq!(c0.shape(), &shape);
    let hidden = {
        let lin = tape.matmul(&c0, &w1)?;
        let biased = tape.add(&lin, &bcast(&b1, dim)?)?;
        tape.gelu(&biased)?
    };
    let out2 = {
        let lin = tape.matmul(&hidden, &w2)?;
        tape.add(&lin, &bcast(&b2, 2 * dim)?)?
    };
    let log_s = tape.narrow(&out2, 2, 0, dim)?;
    let t_shift = tape.narrow(&out2, 2, dim, dim)?;
    let s = {
        let clamped = tape.clamp(
            &log_s,
            S::of_f64(LOG_SCALE_RANGE.0),
            S::of_f64(LOG_SCALE_RANGE.1),
        )?;
        tape.exp(&clamped)?
    };
    let rescaled = tape.mul(&s, &c0)?;
    Ok(tape.add(&rescaled, &t_shift)?)
}

/// Dispatch on the configured distribution.
pub fn sample<S: Element>(
    kind: SamplerKind,
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    prefix: &str,
    heads: usize,
    dim: usize,
    n_tokens: usize,
    rng: &mut Rng,
) -> Result<Tensor, SamplerError> {
    match kind {
        SamplerKind::Gaussian => sample_gaussian(tape, binder, prefix, heads, dim, n_tokens, rng),
        SamplerKind::Flow => sample_flow(tape, binder, prefix, heads, dim, n_tokens, rng),
    }
}
