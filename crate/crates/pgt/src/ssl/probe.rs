//! Linear probe: multinomial logistic regression on frozen summary
//! features. The regression is a plain full-batch Adam loop in f64,
//! independent of the tape engine.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::grouping::BarrierTap;
use crate::model::{self, ModelConfig, ModelError};
use crate::params::{Binding, ParameterStore};
use crate::rng::StreamKey;
use crate::tensor::{Element, Tape};

#[derive(Error, Debug)]
pub enum ProbeError {
    #[error("probe labels contain a single class")]
    SingleClass,
    #[error("feature/label count mismatch: {features} vs {labels}")]
    CountMismatch { features: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Frozen-backbone summary features for `count` items of a probe split.
/// Group-seed streams are keyed by (split, item), never by the token
/// count, so sweeps over the override share seed prefixes.
pub fn summary_features<S: Element>(
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: Split,
    count: usize,
    n_tokens_override: Option<usize>,
    key: StreamKey,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), ProbeError> {
    let split_tag = match split {
        Split::SslTrain => 0u64,
        Split::ProbeTrain => 1,
        Split::ProbeTest => 2,
    };
    let results: Result<Vec<(Vec<f64>, usize)>, ModelError> = (0..count)
        .into_par_iter()
        .map(|i| {
            let (img, label) = dataset.probe_item(split, i);
            let tape = Tape::<S>::no_grad();
            let out = model::forward(
                &tape,
                &Binding::Frozen(store),
                cfg,
                &img,
                key.child(split_tag).child(i as u64),
                n_tokens_override,
                &BarrierTap::None,
            )?;
            Ok((tape.values_f64(&out.summary), label))
        })
        .collect();
    Ok(results?.into_iter().unzip())
}

/// Fit a softmax regression on the training features and report top-1
/// accuracy on the test features.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
) -> Result<f64, ProbeError> {
    if train_x.len() != train_y.len() {
        return Err(ProbeError::CountMismatch {
            features: train_x.len(),
            labels: train_y.len(),
        });
    }
    let first = train_y.first().ok_or(ProbeError::SingleClass)?;
    if train_y.iter().all(|y| y == first) {
        return Err(ProbeError::SingleClass);
    }
    let dim = train_x[0].len();
    let n = train_x.len();

    // standardize with train statistics
    let mut mean = vec![0.0; dim];
    for x in train_x {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; dim];
    for x in train_x {
        for (s, (v, m)) in std.iter_mut().zip(x.iter().zip(mean.iter())) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt().max(1e-6);
    }
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(mean.iter().zip(std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|x| norm(x)).collect();

    // full-batch AdamW on the cross-entropy; deterministic zero init
    let c = n_classes;
    let mut w = vec![0.0; c * dim];
    let mut b = vec![0.0; c];
    let (mut mw, mut vw) = (vec![0.0; c * dim], vec![0.0; c * dim]);
    let (mut mb, mut vb) = (vec![0.0; c], vec![0.0; c]);
    let (beta1, beta2, eps, lr, l2) = (0.9_f64, 0.999_f64, 1e-8, 0.05, 1e-4);
    let iters = 600;
    for t in 1..=iters {
        let mut gw = vec![0.0; c * dim];
        let mut gb = vec![0.0; c];
        for (x, &y) in xs.iter().zip(train_y.iter()) {
            let probs = class_probs(&w, &b, x, c, dim);
            for k in 0..c {
                let err = probs[k] - if k == y { 1.0 } else { 0.0 };
                gb[k] += err / n as f64;
                for (gwi, xi) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x.iter()) {
                    *gwi += err * xi / n as f64;
                }
            }
        }
        for (g, wv) in gw.iter_mut().zip(w.iter()) {
            *g += l2 * wv;
        }
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        };
        upd(&mut w, &gw, &mut mw, &mut vw);
        upd(&mut b, &gb, &mut mb, &mut vb);
    }

    let correct = test_x
        .iter()
        .zip(test_y.iter())
        .filter(|(x, &y)| {
            let probs = class_probs(&w, &b, &norm(x), c, dim);
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(i, _)| i)
                .expect("nonempty");
            pred == y
        })
        .count();
    Ok(correct as f64 / test_x.len() as f64)
}

fn class_probs(w: &[f64], b: &[f64], x: &[f64], c: usize, dim: usize) -> Vec<f64> {
    let mut logits = vec![0.0; c];
    for k in 0..c {
        logits[k] = b[k]
            + w[k * dim..(k + 1) * dim]
                .iter()
                .zip(x.iter())
                .map(|(wi, xi)| wi * xi)
                .sum::<f64>();
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
