//! Diagnostics and analytic cost models: grouping-entropy curves, FLOP
//! counting, peak activation-memory estimation, and attention-map export.

pub mod attn;
pub mod cost;

use serde::Serialize;
use thiserror::Error;

use crate::model::AssignmentMatrix;
use crate::ssl::loss::entropy;
use crate::tensor::{Element, Tape};

#[derive(Error, Debug)]
pub enum AnalysisError {
    #[error("assignment rows are not normalized (row sum {0})")]
    NotNormalized(f64),
    #[error("index out of range: {what} {index} (max {max})")]
    BadIndex {
        what: &'static str,
        index: usize,
        max: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Extracted assignment attention: values of an [H, N, M] tensor.
#[derive(Clone)]
pub struct AttnMatrix {
    pub heads: usize,
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl AttnMatrix {
    pub fn from_tensor<S: Element>(tape: &Tape<S>, a: &AssignmentMatrix) -> Self {
        let s = a.values.shape();
        AttnMatrix {
            heads: s[0],
            n: s[1],
            m: s[2],
            values: tape.values_f64(&a.values),
        }
    }

    pub fn row(&self, head: usize, i: usize) -> &[f64] {
        let base = (head * self.n + i) * self.m;
        &self.values[base..base + self.m]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerEntropy {
    /// Mean over input tokens (and heads) of H(p(group | token)), nats.
    pub conditional: f64,
    /// H of the input-averaged assignment distribution, mean over heads.
    pub marginal: f64,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct EntropyReport {
    pub layers: Vec<LayerEntropy>,
}

/// Entropy curves of the grouping distributions, one entry per layer.
/// Rows must be normalized over the group axis.
pub fn grouping_entropy(per_layer: &[AttnMatrix]) -> Result<EntropyReport, AnalysisError> {
    let mut layers = Vec::with_capacity(per_layer.len());
    for a in per_layer {
        let mut conditional = 0.0;
        let mut marginal = 0.0;
        for head in 0..a.heads {
            let mut mean_row = vec![0.0; a.m];
            for i in 0..a.n {
                let row = a.row(head, i);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(AnalysisError::NotNormalized(sum));
                }
                conditional += entropy(row);
                for (acc, &p) in mean_row.iter_mut().zip(row.iter()) {
                    *acc += p / a.n as f64;
                }
            }
            marginal += entropy(&mean_row);
        }
        layers.push(LayerEntropy {
            conditional: conditional / (a.heads * a.n) as f64,
            marginal: marginal / a.heads as f64,
        });
    }
    Ok(EntropyReport { layers })
}
