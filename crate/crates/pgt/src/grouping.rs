//! The multi-grouping operation: K rounds of binding input tokens onto
//! sampled group tokens.
//!
//! One binding step computes attention logits between group-token queries
//! and input keys, softmaxes over the group axis (each input competes over
//! groups), renormalizes over the input axis (each group takes a weighted
//! mean of its inputs), aggregates values into per-group updates, applies a
//! gated recurrent update shared across iterations, and refines tokens with
//! a per-head MLP over a per-head layer norm.
//!
//! The K-step iteration is treated as a fixed-point process: gradients flow
//! through only the final step. Tokens entering that step pass a gradient
//! barrier, the first-order truncation of the implicit-function gradient.

use std::cell::{Cell, RefCell};

use thiserror::Error;

use crate::init;
use crate::params::{Binding, ParamError, ParameterStore};
use crate::rng::{Rng, StreamKey};
use crate::samplers::{self, SamplerError, SamplerKind};
use crate::tensor::ops::SUM_NORM_EPS;
use crate::tensor::{Element, Tape, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GroupingConfig {
    pub heads: usize,
    pub n_group_tokens: usize,
    pub group_dim: usize,
    pub iterations: usize,
    pub sampler: SamplerKind,
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<(), GroupingError> {
        for (value, what) in [
            (self.heads, "heads"),
            (self.n_group_tokens, "group tokens"),
            (self.group_dim, "group dim"),
            (self.iterations, "iterations"),
        ] {
            if value == 0 {
                return Err(GroupingError::BadConfig(format!("{what} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Error, Debug)]
pub enum GroupingError {
    #[error("invalid grouping config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Group tokens after binding, plus the attention matrices of the final
/// iteration: `binding_attn` after double normalization (columns sum to 1)
/// and `row_softmax` before the column renormalization (rows sum to 1).
pub struct GroupState {
    pub tokens: Tensor,
    pub binding_attn: Tensor,
    pub row_softmax: Tensor,
}

/// Capture or replay the values entering each gradient barrier. `Record`
/// snapshots the tokens entering the final iteration; `Replay` substitutes
/// recorded values as constants (and skips the pre-barrier iterations,
/// whose results would be discarded). Finite-difference probes of a forward
/// pass use Replay so the differentiated function holds barrier inputs
/// fixed, exactly as the backward pass treats them.
pub enum BarrierTap<'a, S: Element> {
    None,
    Record(&'a RefCell<Vec<Vec<S>>>),
    Replay(&'a [Vec<S>], &'a Cell<usize>),
}

impl<'a, S: Element> BarrierTap<'a, S> {
    fn is_replay(&self) -> bool {
        matches!(self, BarrierTap::Replay(..))
    }
}

/// Register every parameter of one grouping operation under `prefix`.
pub fn register_params<S: Element>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    input_dim: usize,
    cfg: &GroupingConfig,
    key: StreamKey,
) -> Result<(), ParamError> {
    let (h, dc) = (cfg.heads, cfg.group_dim);
    let reg = |store: &mut ParameterStore<S>, suffix: &str, shape: &[usize]| -> Result<(), ParamError> {
        let name = format!("{prefix}.{suffix}");
        // negative gate biases open the recurrent cell toward its update
        // path at initialization: group tokens are rebuilt from attention-
        // pooled content each round, so the sampled seeds steer binding
        // without drowning the tokens in seed noise
        let values = if suffix == "gru.update_bias" || suffix == "gru.reset_bias" {
            init::full(shape, -2.0)
        } else if suffix.ends_with("bias") || suffix.ends_with("bias1") || suffix.ends_with("bias2")
        {
            init::zeros(shape)
        } else if suffix.ends_with("gain") {
            init::ones(shape)
        } else {
            init::glorot(key.child_str(&name), shape)
        };
        store.register(&name, values, shape)
    };
    reg(store, "binding.key_proj", &[input_dim, h * dc])?;
    reg(store, "binding.value_proj", &[input_dim, h * dc])?;
    reg(store, "binding.query_proj", &[h, dc, dc])?;
    for gate in ["update", "reset", "cand"] {
        reg(store, &format!("gru.{gate}_w"), &[h, dc, dc])?;
        reg(store, &format!("gru.{gate}_u"), &[h, dc, dc])?;
        reg(store, &format!("gru.{gate}_bias"), &[h, dc])?;
    }
    reg(store, "gmlp.w1", &[h, dc, dc])?;
    reg(store, "gmlp.bias1", &[h, dc])?;
    reg(store, "gmlp.w2", &[h, dc, dc])?;
    reg(store, "gmlp.bias2", &[h, dc])?;
    reg(store, "gln.gain", &[h, dc])?;
    reg(store, "gln.bias", &[h, dc])?;
    samplers::register(cfg.sampler, store, prefix, h, dc, key)
}

/// Project input tokens to per-head keys and values: [N, d] -> [H, N, d_c].
pub fn project_inputs<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    prefix: &str,
    h_tokens: &Tensor,
    heads: usize,
    group_dim: usize,
) -> Result<(Tensor, Tensor), GroupingError> {
    let n = h_tokens.shape()[0];
    let split = |t: &Tensor| -> Result<Tensor, TensorError> {
        let r = tape.reshape(t, &[n, heads, group_dim])?;
        tape.transpose(&r, &[1, 0, 2])
    };
    let key_w = binder.bind(tape, &format!("{prefix}.binding.key_proj"))?;
    let value_w = binder.bind(tape, &format!("{prefix}.binding.value_proj"))?;
    let h_key = split(&tape.matmul(h_tokens, &key_w)?)?;
    let h_value = split(&tape.matmul(h_tokens, &value_w)?)?;
    Ok((h_key, h_value))
}

fn per_head_bias<S: Element>(
    tape: &Tape<S>,
    bias: &Tensor,
    heads: usize,
    m: usize,
    dc: usize,
) -> Result<Tensor, TensorError> {
    let r = tape.reshape(bias, &[heads, 1, dc])?;
    tape.broadcast_to(&r, &[heads, m, dc])
}

/// One binding iteration.
pub fn binding_step<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    prefix: &str,
    tokens: &Tensor,
    h_key: &Tensor,
    h_value: &Tensor,
) -> Result<GroupState, GroupingError> {
    let (heads, m, dc) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let n = h_key.shape()[1];
    let p = |s: &str| format!("{prefix}.{s}");
    let ctx = |e: TensorError, what: &str| -> GroupingError {
        GroupingError::Tensor(e.with_context(&p(what)))
    };

    // attention over groups, then weighted-mean renormalization over inputs.
    // tokens are normalized before the query projection (slot-attention
    // style) so attention sharpness cannot decay through token scale
    let query_w = binder.bind(tape, &p("binding.query_proj"))?;
    let queries = {
        let normed = tape.standardize(tokens)?;
        tape.matmul(&normed, &query_w)?
    };
    let scale = S::of_f64(1.0 / (dc as f64).sqrt());
    let logits = {
        let qt = tape.transpose(&queries, &[0, 2, 1])?;
        let raw = tape
            .matmul(h_key, &qt)
            .map_err(|e| ctx(e, "binding.logits"))?;
        tape.mul_scalar(&raw, scale)?
    };
    debug_assert_eq!(logits.shape(), &[heads, n, m]);
    let row_softmax = tape.softmax(&logits, 2)?;
    let attn = {
        let col_sum = tape.reduce_sum(&row_softmax, 1, true)?;
        let guarded = tape.add_scalar(&col_sum, S::of_f64(SUM_NORM_EPS))?;
        let denom = tape.broadcast_to(&guarded, &[heads, n, m])?;
        tape.div(&row_softmax, &denom)?
    };
    let updates = tape.contract("hij,hid->hjd", &attn, h_value)?;

    // gated recurrent update, parameters shared across the K iterations
    let gate = |w: &str, u: &str, b: &str| -> Result<Tensor, GroupingError> {
        let wt = binder.bind(tape, &p(w))?;
        let ut = binder.bind(tape, &p(u))?;
        let bt = binder.bind(tape, &p(b))?;
        let xu = tape.matmul(&updates, &wt)?;
        let hu = tape.matmul(tokens, &ut)?;
        let sum = tape.add(&xu, &hu)?;
        Ok(tape.add(&sum, &per_head_bias(tape, &bt, heads, m, dc)?)?)
    };
    let z = tape.sigmoid(&gate("gru.update_w", "gru.update_u", "gru.update_bias")?)?;
    let r = tape.sigmoid(&gate("gru.reset_w", "gru.reset_u", "gru.reset_bias")?)?;
    let cand = {
        let wt = binder.bind(tape, &p("gru.cand_w"))?;
        let ut = binder.bind(tape, &p("gru.cand_u"))?;
        let bt = binder.bind(tape, &p("gru.cand_bias"))?;
        let xu = tape.matmul(&updates, &wt)?;
        let gated_h = tape.mul(&r, tokens)?;
        let hu = tape.matmul(&gated_h, &ut)?;
        let sum = tape.add(&xu, &hu)?;
        tape.tanh(&tape.add(&sum, &per_head_bias(tape, &bt, heads, m, dc)?)?)?
    };
    // h' = (1 - z) * cand + z * h  ==  cand + z * (h - cand)
    let gru_out = {
        let delta = tape.sub(tokens, &cand)?;
        let gated = tape.mul(&z, &delta)?;
        tape.add(&cand, &gated)?
    };

    // per-head layer norm + per-head MLP, residual
    let gln = {
        let y = tape.standardize(&gru_out)?;
        let gain = binder.bind(tape, &p("gln.gain"))?;
        let bias = binder.bind(tape, &p("gln.bias"))?;
        let scaled = tape.mul(&y, &per_head_bias(tape, &gain, heads, m, dc)?)?;
        tape.add(&scaled, &per_head_bias(tape, &bias, heads, m, dc)?)?
    };
    let mlp = {
        let w1 = binder.bind(tape, &p("gmlp.w1"))?;
        let b1 = binder.bind(tape, &p("gmlp.bias1"))?;
        let w2 = binder.bind(tape, &p("gmlp.w2"))?;
        let b2 = binder.bind(tape, &p("gmlp.bias2"))?;
        let h1 = {
            let lin = tape.matmul(&gln, &w1)?;
            tape.gelu(&tape.add(&lin, &per_head_bias(tape, &b1, heads, m, dc)?)?)?
        };
        let lin = tape.matmul(&h1, &w2)?;
        tape.add(&lin, &per_head_bias(tape, &b2, heads, m, dc)?)?
    };
    let out_tokens = tape.add(&mlp, &gru_out)?;
    Ok(GroupState {
        tokens: out_tokens,
        binding_attn: attn,
        row_softmax,
    })
}

/// Sample seeds and run K binding iterations with the gradient barrier
/// placed on the tokens entering the final one. `n_tokens_override`
/// replaces the configured token count at sampling time only.
pub fn multi_grouping<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    prefix: &str,
    h_tokens: &Tensor,
    cfg: &GroupingConfig,
    n_tokens_override: Option<usize>,
    seed_rng: &mut Rng,
    tap: &BarrierTap<'_, S>,
) -> Result<GroupState, GroupingError> {
    cfg.validate()?;
    let m = n_tokens_override.unwrap_or(cfg.n_group_tokens);
    if m == 0 {
        return Err(GroupingError::Sampler(SamplerError::ZeroTokens));
    }
    let (heads, dc, k) = (cfg.heads, cfg.group_dim, cfg.iterations);
    let (h_key, h_value) = project_inputs(tape, binder, prefix, h_tokens, heads, dc)?;

    let mut tokens = if tap.is_replay() {
        // pre-barrier work is discarded under replay; skip straight to the
        // recorded barrier input
        tape.zeros(&[heads, m, dc])
    } else {
        samplers::sample(cfg.sampler, tape, binder, prefix, heads, dc, m, seed_rng)?
    };
    if !tap.is_replay() {
        for _ in 0..k.saturating_sub(1) {
            tokens = binding_step(tape, binder, prefix, &tokens, &h_key, &h_value)?.tokens;
        }
    }
    tokens = match tap {
        BarrierTap::None => tape.gradient_barrier(&tokens)?,
        BarrierTap::Record(log) => {
            log.borrow_mut().push(tape.values(&tokens).as_ref().clone());
            tape.gradient_barrier(&tokens)?
        }
        BarrierTap::Replay(cache, cursor) => {
            let i = cursor.get();
            cursor.set(i + 1);
            tape.constant(cache[i].clone(), &[heads, m, dc])?
        }
    };
    binding_step(tape, binder, prefix, &tokens, &h_key, &h_value)
}
