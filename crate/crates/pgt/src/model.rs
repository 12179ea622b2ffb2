//! The full backbone: patch embedding, grouping layers and blocks, and the
//! attention-pooling summary head.
//!
//! A grouping layer runs the multi-grouping operation over the current
//! input tokens, reads group context back through an assignment attention
//! normalized over the group axis only, mixes heads with a linear map, and
//! refines tokens with a residual MLP. The summary head pools all final
//! group tokens into one vector with a learnable query.

use thiserror::Error;

use crate::data::Image;
use crate::grouping::{self, BarrierTap, GroupingConfig, GroupingError, GroupState};
use crate::init;
use crate::params::{Binding, ParamError, ParameterStore};
use crate::rng::StreamKey;
use crate::samplers::SamplerKind;
use crate::tensor::{Element, Tape, Tensor, TensorError};

/// Heads used by the summary attention pool.
pub const SUMMARY_HEADS: usize = 4;

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub n_layers: usize,
    pub grouping: GroupingConfig,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub input_dim: usize,
    pub mlp_factor: usize,
    pub map_dim: usize,
    /// Learned value projection on group tokens in the readout; `false`
    /// reads out raw group tokens.
    pub readout_value_proj: bool,
    pub blocks: Vec<BlockConfig>,
}

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("image {h}x{w} not divisible by patch size {p}")]
    IndivisibleImage { h: usize, w: usize, p: usize },
    #[error("view grid {vh}x{vw} exceeds the positional table grid {g}x{g}")]
    ViewTooLarge { vh: usize, vw: usize, g: usize },
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks.is_empty() {
            return Err(ModelError::BadConfig("blocks must be nonempty".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::BadConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.map_dim == 0 || self.map_dim % SUMMARY_HEADS != 0 {
            return Err(ModelError::BadConfig(format!(
                "map_dim {} must be a positive multiple of {SUMMARY_HEADS}",
                self.map_dim
            )));
        }
        if self.input_dim == 0 || self.mlp_factor == 0 {
            return Err(ModelError::BadConfig(
                "input_dim and mlp_factor must be >= 1".into(),
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.n_layers == 0 {
                return Err(ModelError::BadConfig(format!("block {i} has zero layers")));
            }
            b.grouping.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn n_layers_total(&self) -> usize {
        self.blocks.iter().map(|b| b.n_layers).sum()
    }

    /// (prefix, grouping config) for every layer, in forward order.
    pub fn layer_specs(&self) -> Vec<(String, &GroupingConfig)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for l in 0..block.n_layers {
                out.push((format!("block{b}.layer{l}"), &block.grouping));
            }
        }
        out
    }

    pub fn last_group_dim(&self) -> usize {
        self.blocks.last().expect("validated nonempty").grouping.group_dim
    }

    /// Desk-scale test configuration: 3 blocks x 1 layer, 64-dim tokens,
    /// 8 group tokens, ascending group dims, 2 heads, 3 iterations.
    pub fn micro() -> Self {
        let block = |dc: usize| BlockConfig {
            n_layers: 1,
            grouping: GroupingConfig {
                heads: 2,
                n_group_tokens: 8,
                group_dim: dc,
                iterations: 3,
                sampler: SamplerKind::Gaussian,
            },
        };
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            input_dim: 64,
            mlp_factor: 1,
            map_dim: 128,
            readout_value_proj: true,
            blocks: vec![block(16), block(24), block(32)],
        }
    }

    /// Full-scale configuration used for analytic cost reports: 3 blocks x
    /// 10 layers, 384-dim tokens, 256 group tokens per layer, group dims
    /// 98/192/288, 6 heads, 3 iterations, 2048-dim summary token.
    pub fn pgt_b() -> Self {
        let block = |dc: usize| BlockConfig {
            n_layers: 10,
            grouping: GroupingConfig {
                heads: 6,
                n_group_tokens: 256,
                group_dim: dc,
                iterations: 3,
                sampler: SamplerKind::Gaussian,
            },
        };
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            input_dim: 384,
            mlp_factor: 1,
            map_dim: 2048,
            readout_value_proj: true,
            blocks: vec![block(98), block(192), block(288)],
        }
    }
}

/// Register every backbone parameter.
pub fn init_params<S: Element>(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ParameterStore<S>, ModelError> {
    cfg.validate()?;
    let key = StreamKey::root(seed).child_str("init");
    let mut store = ParameterStore::new();
    let d = cfg.input_dim;
    let reg = |store: &mut ParameterStore<S>, name: &str, shape: &[usize], kind: &str| -> Result<(), ParamError> {
        let values = match kind {
            "zeros" => init::zeros(shape),
            "ones" => init::ones(shape),
            "pos" => init::normal(key.child_str(name), shape, 0.02),
            _ => init::glorot(key.child_str(name), shape),
        };
        store.register(name, values, shape)
    };
    reg(&mut store, "embed.weight", &[cfg.patch_dim(), d], "glorot")?;
    reg(&mut store, "embed.bias", &[d], "zeros")?;
    reg(&mut store, "embed.pos", &[cfg.n_patches(), d], "pos")?;
    for (prefix, gcfg) in cfg.layer_specs() {
        grouping::register_params(&mut store, &prefix, d, gcfg, key)?;
        let (h, dc) = (gcfg.heads, gcfg.group_dim);
        let p = |s: &str| format!("{prefix}.{s}");
        reg(&mut store, &p("readout.query_proj"), &[d, h * dc], "glorot")?;
        reg(&mut store, &p("readout.key_proj"), &[h, dc, dc], "glorot")?;
        if cfg.readout_value_proj {
            reg(&mut store, &p("readout.value_proj"), &[h, dc, dc], "glorot")?;
        }
        reg(&mut store, &p("readout.mix"), &[h * dc, d], "glorot")?;
        reg(&mut store, &p("readout.mix_bias"), &[d], "zeros")?;
        reg(&mut store, &p("ln.gain"), &[d], "ones")?;
        reg(&mut store, &p("ln.bias"), &[d], "zeros")?;
        reg(&mut store, &p("mlp.w1"), &[d, cfg.mlp_factor * d], "glorot")?;
        reg(&mut store, &p("mlp.bias1"), &[cfg.mlp_factor * d], "zeros")?;
        reg(&mut store, &p("mlp.w2"), &[cfg.mlp_factor * d, d], "glorot")?;
        reg(&mut store, &p("mlp.bias2"), &[d], "zeros")?;
    }
    let dc_last = cfg.last_group_dim();
    reg(&mut store, "summary.query", &[cfg.map_dim], "pos")?;
    reg(&mut store, "summary.key_proj", &[dc_last, cfg.map_dim], "glorot")?;
    reg(&mut store, "summary.value_proj", &[dc_last, cfg.map_dim], "glorot")?;
    Ok(store)
}

/// Flatten non-overlapping patches, embed linearly, add the learned
/// positional table (center-cropped for views smaller than training
/// resolution).
pub fn embed_patches<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    cfg: &ModelConfig,
    image: &Image,
) -> Result<Tensor, ModelError> {
    let p = cfg.patch_size;
    if image.height % p != 0 || image.width % p != 0 {
        return Err(ModelError::IndivisibleImage {
            h: image.height,
            w: image.width,
            p,
        });
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let g = cfg.grid();
    if gh > g || gw > g {
        return Err(ModelError::ViewTooLarge { vh: gh, vw: gw, g });
    }
    let n = gh * gw;
    let pd = cfg.patch_dim();
    let mut patches = vec![S::zero(); n * pd];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * pd;
            let mut off = 0;
            for py in 0..p {
                for px in 0..p {
                    let rgb = image.pixel(gy * p + py, gx * p + px);
                    for c in 0..3 {
                        patches[base + off] = S::of_f64(rgb[c]);
                        off += 1;
                    }
                }
            }
        }
    }
    let x = tape.constant(patches, &[n, pd])?;
    let w = binder.bind(tape, "embed.weight")?;
    let b = binder.bind(tape, "embed.bias")?;
    let embedded = tape.linear(&x, &w, Some(&b))?;
    let pos_full = binder.bind(tape, "embed.pos")?;
    let pos = if gh == g && gw == g {
        pos_full
    } else {
        let table = tape.reshape(&pos_full, &[g, g, cfg.input_dim])?;
        let rows = tape.narrow(&table, 0, (g - gh) / 2, gh)?;
        let cols = tape.narrow(&rows, 1, (g - gw) / 2, gw)?;
        tape.reshape(&cols, &[n, cfg.input_dim])?
    };
    Ok(tape.add(&embedded, &pos)?)
}

/// Assignment from input tokens to group tokens, normalized over the group
/// axis only (rows sum to 1).
pub struct AssignmentMatrix {
    pub values: Tensor,
}

/// One grouping layer.
pub fn grouping_layer<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    cfg: &ModelConfig,
    prefix: &str,
    h_prev: &Tensor,
    gcfg: &GroupingConfig,
    n_tokens_override: Option<usize>,
    seeds: StreamKey,
    tap: &BarrierTap<'_, S>,
) -> Result<(Tensor, GroupState, AssignmentMatrix), ModelError> {
    let n = h_prev.shape()[0];
    let (heads, dc) = (gcfg.heads, gcfg.group_dim);
    let p = |s: &str| format!("{prefix}.{s}");

    let state = grouping::multi_grouping(
        tape,
        binder,
        prefix,
        h_prev,
        gcfg,
        n_tokens_override,
        &mut seeds.rng(),
        tap,
    )?;
    let m = state.tokens.shape()[1];

    // readout attention: input-token queries against group-token keys,
    // softmax over groups only
    let queries = {
        let w = binder.bind(tape, &p("readout.query_proj"))?;
        let flat = tape.matmul(h_prev, &w)?;
        let r = tape.reshape(&flat, &[n, heads, dc])?;
        tape.transpose(&r, &[1, 0, 2])?
    };
    let keys = {
        let w = binder.bind(tape, &p("readout.key_proj"))?;
        tape.matmul(&state.tokens, &w)?
    };
    let logits = {
        let kt = tape.transpose(&keys, &[0, 2, 1])?;
        let raw = tape
            .matmul(&queries, &kt)
            .map_err(|e| ModelError::Tensor(e.with_context(&p("readout.logits"))))?;
        tape.mul_scalar(&raw, S::of_f64(1.0 / (dc as f64).sqrt()))?
    };
    let assign = tape.softmax(&logits, 2)?;
    debug_assert_eq!(assign.shape(), &[heads, n, m]);

    let read_values = if cfg.readout_value_proj {
        let w = binder.bind(tape, &p("readout.value_proj"))?;
        tape.matmul(&state.tokens, &w)?
    } else {
        state.tokens.clone()
    };
    let per_head = tape.contract("hnm,hmd->hnd", &assign, &read_values)?;
    let mixed = {
        let t = tape.transpose(&per_head, &[1, 0, 2])?;
        let flat = tape.reshape(&t, &[n, heads * dc])?;
        let w = binder.bind(tape, &p("readout.mix"))?;
        let b = binder.bind(tape, &p("readout.mix_bias"))?;
        tape.linear(&flat, &w, Some(&b))?
    };

    // h_out = h_prev + MLP(LN(mixed))
    let normed = {
        let gain = binder.bind(tape, &p("ln.gain"))?;
        let bias = binder.bind(tape, &p("ln.bias"))?;
        tape.layer_norm(&mixed, &gain, &bias)?
    };
    let mlp = {
        let w1 = binder.bind(tape, &p("mlp.w1"))?;
        let b1 = binder.bind(tape, &p("mlp.bias1"))?;
        let w2 = binder.bind(tape, &p("mlp.w2"))?;
        let b2 = binder.bind(tape, &p("mlp.bias2"))?;
        let hidden = tape.gelu(&tape.linear(&normed, &w1, Some(&b1))?)?;
        tape.linear(&hidden, &w2, Some(&b2))?
    };
    let h_out = tape.add(h_prev, &mlp)?;
    Ok((h_out, state, AssignmentMatrix { values: assign }))
}

/// Attention pooling over all final group tokens with one learnable query.
pub fn summary_head<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    map_dim: usize,
    group_tokens: &Tensor,
) -> Result<Tensor, ModelError> {
    let (h, m, dc) = (
        group_tokens.shape()[0],
        group_tokens.shape()[1],
        group_tokens.shape()[2],
    );
    let t = h * m;
    let hd = map_dim / SUMMARY_HEADS;
    let flat = tape.reshape(group_tokens, &[t, dc])?;
    let keys = {
        let w = binder.bind(tape, "summary.key_proj")?;
        let k = tape.matmul(&flat, &w)?;
        let r = tape.reshape(&k, &[t, SUMMARY_HEADS, hd])?;
        tape.transpose(&r, &[1, 0, 2])?
    };
    let values = {
        let w = binder.bind(tape, "summary.value_proj")?;
        let v = tape.matmul(&flat, &w)?;
        let r = tape.reshape(&v, &[t, SUMMARY_HEADS, hd])?;
        tape.transpose(&r, &[1, 0, 2])?
    };
    let query = {
        let q = binder.bind(tape, "summary.query")?;
        tape.reshape(&q, &[SUMMARY_HEADS, 1, hd])?
    };
    let attn = {
        let kt = tape.transpose(&keys, &[0, 2, 1])?;
        let raw = tape.matmul(&query, &kt)?;
        let scaled = tape.mul_scalar(&raw, S::of_f64(1.0 / (hd as f64).sqrt()))?;
        tape.softmax(&scaled, 2)?
    };
    let ctx = tape.matmul(&attn, &values)?;
    Ok(tape.reshape(&ctx, &[map_dim])?)
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    /// Refined input tokens after the last layer, [N, d].
    pub refined_tokens: Tensor,
    /// Group state of the last layer.
    pub final_groups: GroupState,
    /// Per-layer readout assignment matrices, [H, N, M] each.
    pub assignments: Vec<AssignmentMatrix>,
    /// Pooled image representation, [map_dim].
    pub summary: Tensor,
    /// L2 norm of the refined tokens after each layer (diagnostics).
    pub layer_norms: Vec<(String, f64)>,
}

/// Run the backbone. `n_tokens_override` swaps the group-token count of
/// every layer at sampling time; parameters are untouched.
pub fn forward<S: Element>(
    tape: &Tape<S>,
    binder: &Binding<'_, S>,
    cfg: &ModelConfig,
    image: &Image,
    seeds: StreamKey,
    n_tokens_override: Option<usize>,
    tap: &BarrierTap<'_, S>,
) -> Result<ForwardOutput, ModelError> {
    let mut h = embed_patches(tape, binder, cfg, image)?;
    let mut assignments = Vec::new();
    let mut final_groups = None;
    let mut layer_norms = Vec::new();
    for (idx, (prefix, gcfg)) in cfg.layer_specs().into_iter().enumerate() {
        let (h_next, state, assign) = grouping_layer(
            tape,
            binder,
            cfg,
            &prefix,
            &h,
            gcfg,
            n_tokens_override,
            seeds.child(idx as u64),
            tap,
        )?;
        h = h_next;
        let norm = tape
            .values(&h)
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        layer_norms.push((prefix, norm));
        assignments.push(assign);
        final_groups = Some(state);
    }
    let final_groups = final_groups.expect("validated nonempty blocks");
    let summary = summary_head(tape, binder, cfg.map_dim, &final_groups.tokens)?;
    Ok(ForwardOutput {
        refined_tokens: h,
        final_groups,
        assignments,
        summary,
        layer_norms,
    })
}

/// Per-layer refined-token norms for diagnostics, collected until the
/// evaluation fails (the failing layer is included with a NaN norm).
pub fn activation_norms<S: Element>(
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    image: &Image,
    seeds: StreamKey,
) -> Vec<(String, f64)> {
    let tape = Tape::<S>::no_grad();
    let binder = Binding::Frozen(store);
    let mut norms = Vec::new();
    let mut h = match embed_patches(&tape, &binder, cfg, image) {
        Ok(t) => t,
        Err(_) => {
            norms.push(("embed".to_string(), f64::NAN));
            return norms;
        }
    };
    for (idx, (prefix, gcfg)) in cfg.layer_specs().into_iter().enumerate() {
        match grouping_layer(
            &tape,
            &binder,
            cfg,
            &prefix,
            &h,
            gcfg,
            None,
            seeds.child(idx as u64),
            &BarrierTap::None,
        ) {
            Ok((h_next, _, _)) => {
                let norm = tape
                    .values(&h_next)
                    .iter()
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                norms.push((prefix, norm));
                h = h_next;
            }
            Err(_) => {
                norms.push((prefix, f64::NAN));
                return norms;
            }
        }
    }
    norms
}
