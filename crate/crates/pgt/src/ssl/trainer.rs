//! The training loop: per-sample view forwards in parallel, a serialized
//! merge of gradients, AdamW on the student, EMA into the teacher, center
//! update, metrics streaming, and resumable checkpoints.
//!
//! Determinism: every random draw is keyed by (seed, step, slot, purpose),
//! gradients merge in slot order, and resumption only needs the checkpoint
//! plus the original seed, so a resumed run replays the exact arithmetic of
//! an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::head;
use super::loss::{self, teacher_probs};
use super::optim::{clip_grad_norm, cosine_schedule, linear_warmup, lr_schedule, AdamW};
use super::TrainError;
use crate::augment::{make_crop_set, AugmentConfig, CropSet};
use crate::config::FileConfig;
use crate::data::{Dataset, Split};
use crate::grouping::BarrierTap;
use crate::model;
use crate::params::{Binding, Checkpoint, ParameterStore};
use crate::rng::StreamKey;
use crate::tensor::{Element, Tape, Tensor};

pub struct TrainState<S: Element> {
    pub student: ParameterStore<S>,
    pub teacher: ParameterStore<S>,
    pub center: Vec<S>,
    pub opt: AdamW<S>,
    pub step: u64,
}

pub fn init_state<S: Element>(fc: &FileConfig, seed: u64) -> Result<TrainState<S>, TrainError> {
    let mut student = model::init_params(&fc.model, seed)?;
    head::register_head(
        &mut student,
        fc.model.map_dim,
        fc.train.head_hidden,
        fc.train.head_bottleneck,
        fc.train.prototypes,
        StreamKey::root(seed).child_str("init"),
    )?;
    let teacher = student.clone_values();
    Ok(TrainState {
        student,
        teacher,
        center: vec![S::zero(); fc.train.prototypes],
        opt: AdamW::new(fc.train.weight_decay),
        step: 0,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Bit pattern of `loss` (hex) for exact cross-run comparison.
    pub loss_bits: String,
    pub teacher_entropy: f64,
    pub lr: f64,
    pub momentum: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marg_entropy: Option<f64>,
}

struct SampleOutput<S: Element> {
    grads: BTreeMap<String, Vec<S>>,
    loss: f64,
    teacher_logits: Vec<Vec<f64>>,
    teacher_entropy: f64,
}

fn augment_config(fc: &FileConfig) -> AugmentConfig {
    AugmentConfig {
        global_size: fc.model.image_size,
        local_size: fc.train.local_size,
        n_global: 2,
        n_local: fc.train.local_views,
        global_scale: (fc.train.global_crop_min, fc.train.global_crop_max),
        local_scale: (fc.train.local_crop_min, fc.train.local_crop_max),
        hflip_p: 0.5,
        jitter: 0.3,
        grayscale_p: 0.5,
    }
}

fn eval_sample<S: Element>(
    student: &ParameterStore<S>,
    teacher: &ParameterStore<S>,
    fc: &FileConfig,
    crops: &CropSet,
    sample_key: StreamKey,
    center: &[f64],
    teacher_temp: f64,
) -> Result<SampleOutput<S>, TrainError> {
    let tape = Tape::<S>::new();
    let frozen = Binding::Frozen(teacher);
    let mut teacher_logits = Vec::with_capacity(crops.global_views.len());
    for (g, view) in crops.global_views.iter().enumerate() {
        let out = model::forward(
            &tape,
            &frozen,
            &fc.model,
            view,
            sample_key.child_str("teacher").child(g as u64),
            None,
            &BarrierTap::None,
        )?;
        let logits = head::head_forward(&tape, &frozen, &out.summary)?;
        teacher_logits.push(tape.values_f64(&logits));
    }
    let trainable = Binding::Train(student);
    let mut student_logits: Vec<Tensor> = Vec::with_capacity(crops.n_views());
    for (v, view) in crops.all_views().enumerate() {
        let out = model::forward(
            &tape,
            &trainable,
            &fc.model,
            view,
            sample_key.child_str("student").child(v as u64),
            None,
            &BarrierTap::None,
        )?;
        student_logits.push(head::head_forward(&tape, &trainable, &out.summary)?);
    }
    let loss_t = loss::distill_loss(
        &tape,
        &student_logits,
        &teacher_logits,
        center,
        fc.train.student_temp,
        teacher_temp,
    )?;
    let loss = tape.value_scalar(&loss_t)?.as_f64();
    let grads = tape.backward(&loss_t)?.into_named();
    let teacher_entropy = teacher_logits
        .iter()
        .map(|t| loss::entropy(&teacher_probs(t, center, teacher_temp)))
        .sum::<f64>()
        / teacher_logits.len() as f64;
    Ok(SampleOutput {
        grads,
        loss,
        teacher_logits,
        teacher_entropy,
    })
}

/// Current schedule values at a step.
pub fn schedules(fc: &FileConfig, step: u64, total: u64) -> (f64, f64, f64) {
    let lr = lr_schedule(fc.train.lr, fc.train.lr_min, fc.train.warmup_frac, step, total);
    let tt_warmup = ((total as f64) * fc.train.teacher_temp_warmup_frac).round() as u64;
    let teacher_temp = linear_warmup(
        fc.train.teacher_temp_start,
        fc.train.teacher_temp_end,
        step,
        tt_warmup,
    );
    let momentum = cosine_schedule(fc.train.ema_start, fc.train.ema_end, step, total);
    (lr, teacher_temp, momentum)
}

/// One optimization step: deterministic under (seed, state.step).
/// Schedules always span `fc.train.steps`, so an interrupted run resumed
/// from a checkpoint replays the identical trajectory.
pub fn train_step<S: Element>(
    state: &mut TrainState<S>,
    fc: &FileConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<StepMetrics, TrainError> {
    let step = state.step;
    let root = StreamKey::root(seed);
    let (lr, teacher_temp, momentum) = schedules(fc, step, fc.train.steps);
    let batch = fc.train.batch_size;
    let aug_cfg = augment_config(fc);

    let mut batch_rng = root.child_str("batch").child(step).rng();
    let picks: Vec<(usize, usize)> = (0..batch)
        .map(|slot| (slot, batch_rng.below(fc.dataset.size.max(1))))
        .collect();
    let center_f64: Vec<f64> = state.center.iter().map(|c| c.as_f64()).collect();

    let outputs: Result<Vec<SampleOutput<S>>, TrainError> = picks
        .par_iter()
        .map(|&(slot, index)| {
            let img = dataset.ssl_image(index);
            let sample_key = root.child_str("step").child(step).child(slot as u64);
            let crops = make_crop_set(&img, &aug_cfg, &mut sample_key.child_str("aug").rng());
            eval_sample(
                &state.student,
                &state.teacher,
                fc,
                &crops,
                sample_key,
                &center_f64,
                teacher_temp,
            )
        })
        .collect();
    let outputs = outputs?;

    // serialized commit phase
    state.student.zero_grads();
    let weight = S::of_f64(1.0 / batch as f64);
    let mut loss_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut center_mean = vec![0.0; fc.train.prototypes];
    let mut n_teacher_views = 0usize;
    for out in &outputs {
        state.student.accumulate(&out.grads, weight)?;
        loss_sum += out.loss;
        entropy_sum += out.teacher_entropy;
        for logits in &out.teacher_logits {
            for (acc, &l) in center_mean.iter_mut().zip(logits.iter()) {
                *acc += l;
            }
            n_teacher_views += 1;
        }
    }
    let grad_norm = clip_grad_norm(&mut state.student, fc.train.clip_norm);
    state.opt.step(&mut state.student, lr);
    state.teacher.ema_update_from(&state.student, S::of_f64(momentum))?;
    let cm = fc.train.center_momentum;
    for (c, &sum) in state.center.iter_mut().zip(center_mean.iter()) {
        let mean = sum / n_teacher_views as f64;
        *c = S::of_f64(cm * c.as_f64() + (1.0 - cm) * mean);
    }
    state.step += 1;

    let loss = loss_sum / batch as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            message: format!("step {} loss is not finite", state.step),
            norms: Vec::new(),
        });
    }
    Ok(StepMetrics {
        step: state.step,
        loss,
        loss_bits: format!("{:016x}", loss.to_bits()),
        teacher_entropy: entropy_sum / batch as f64,
        lr,
        momentum,
        grad_norm,
        cond_entropy: None,
        marg_entropy: None,
    })
}

/// Final-layer assignment entropies of the student on a fixed evaluation
/// set (fixed images and seed streams, so curves are comparable across
/// steps).
pub fn entropy_probe<S: Element>(
    student: &ParameterStore<S>,
    fc: &FileConfig,
    dataset: &Dataset,
    seed: u64,
    n_images: usize,
) -> Result<(f64, f64), TrainError> {
    let key = StreamKey::root(seed).child_str("entropy-eval");
    let per_image: Result<Vec<(f64, f64)>, TrainError> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let (img, _) = dataset.probe_item(Split::ProbeTrain, i);
            let tape = Tape::<S>::no_grad();
            let out = model::forward(
                &tape,
                &Binding::Frozen(student),
                &fc.model,
                &img,
                key.child(i as u64),
                None,
                &BarrierTap::None,
            )?;
            let last = out.assignments.last().expect("nonempty layers");
            let attn = crate::analysis::AttnMatrix::from_tensor(&tape, last);
            let report = crate::analysis::grouping_entropy(&[attn])
                .expect("softmax rows are normalized");
            let l = &report.layers[0];
            Ok((l.conditional, l.marginal))
        })
        .collect();
    let per_image = per_image?;
    let n = per_image.len() as f64;
    Ok((
        per_image.iter().map(|p| p.0).sum::<f64>() / n,
        per_image.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

pub fn save_state<S: Element>(state: &TrainState<S>, path: &Path) -> Result<(), TrainError> {
    let mut ck = Checkpoint::new();
    ck.insert_store("student", &state.student);
    ck.insert_store("teacher", &state.teacher);
    let (m, v, t) = state.opt.export();
    for (name, vals) in m {
        ck.insert(&format!("adam.m.{name}"), vec![vals.len()], vals.clone());
    }
    for (name, vals) in v {
        ck.insert(&format!("adam.v.{name}"), vec![vals.len()], vals.clone());
    }
    ck.insert("state.center", vec![state.center.len()], state.center.clone());
    ck.insert_scalar("state.step", state.step as f64);
    ck.insert_scalar("state.adam_t", t as f64);
    ck.save(path)?;
    Ok(())
}

pub fn load_state<S: Element>(path: &Path, weight_decay: f64) -> Result<TrainState<S>, TrainError> {
    let ck = Checkpoint::<S>::load(path)?;
    let student = ck.extract_store("student")?;
    let teacher = ck.extract_store("teacher")?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, (_, vals)) in &ck.tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), vals.clone());
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), vals.clone());
        }
    }
    let center = ck
        .tensors
        .get("state.center")
        .map(|(_, v)| v.clone())
        .unwrap_or_default();
    let step = ck.scalar("state.step").unwrap_or(0.0) as u64;
    let t = ck.scalar("state.adam_t").unwrap_or(0.0) as u64;
    Ok(TrainState {
        student,
        teacher,
        center,
        opt: AdamW::restore(weight_decay, m, v, t),
        step,
    })
}

/// Load the student parameters alone from a training checkpoint.
pub fn load_student<S: Element>(path: &Path) -> Result<ParameterStore<S>, TrainError> {
    let ck = Checkpoint::<S>::load(path)?;
    Ok(ck.extract_store("student")?)
}

/// Run (or continue) training until `run_until`, appending one JSON
/// metrics line per step and checkpointing periodically. `run_until` only
/// says where to stop; schedule horizons follow the config.
pub fn run_training<S: Element>(
    state: &mut TrainState<S>,
    fc: &FileConfig,
    dataset: &Dataset,
    seed: u64,
    run_until: u64,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(), TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.ndjson");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let checkpoint_path = out_dir.join("checkpoint.pgt");
    while state.step < run_until {
        let mut m = match train_step(state, fc, dataset, seed) {
            Ok(m) => m,
            Err(e) if e.is_numerical() => {
                // diagnostic dump: per-layer activation norms on a probe image
                let (img, _) = dataset.probe_item(Split::ProbeTrain, 0);
                let norms = model::activation_norms(
                    &state.student,
                    &fc.model,
                    &img,
                    StreamKey::root(seed).child_str("diagnostic"),
                );
                let diag = serde_json::json!({
                    "error": e.to_string(),
                    "step": state.step,
                    "activation_norms": norms,
                });
                let _ = std::fs::write(
                    out_dir.join("numerical_failure.json"),
                    serde_json::to_vec_pretty(&diag).expect("serializable"),
                );
                return Err(TrainError::NonFinite {
                    message: e.to_string(),
                    norms,
                });
            }
            Err(e) => return Err(e),
        };
        if m.step % fc.train.entropy_every == 0 || m.step == run_until {
            let (cond, marg) = entropy_probe(&state.student, fc, dataset, seed, 16)?;
            m.cond_entropy = Some(cond);
            m.marg_entropy = Some(marg);
        }
        writeln!(metrics, "{}", serde_json::to_string(&m).expect("serializable"))?;
        if m.step % fc.train.checkpoint_every == 0 || m.step == run_until {
            save_state(state, &checkpoint_path)?;
        }
        on_step(&m);
    }
    Ok(())
}
