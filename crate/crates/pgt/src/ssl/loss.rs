//! Student-teacher distillation loss: cross-entropy between sharpened,
//! centered teacher distributions on global views and student
//! log-probabilities on every other view, averaged over view pairs.

use super::TrainError;
use crate::tensor::{Element, Tape, Tensor};

/// Teacher distribution: softmax((logits - center) / temp), values only.
pub fn teacher_probs(logits: &[f64], center: &[f64], temp: f64) -> Vec<f64> {
    debug_assert_eq!(logits.len(), center.len());
    let scaled: Vec<f64> = logits
        .iter()
        .zip(center.iter())
        .map(|(l, c)| (l - c) / temp)
        .collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy in nats; p log p -> 0 at p = 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Distillation loss over one sample's views. `student_logits` covers all
/// views (globals first); `teacher_logits` covers the global views and must
/// come from a gradient-free evaluation. The previous-step `center` is
/// applied to the teacher only.
pub fn distill_loss<S: Element>(
    tape: &Tape<S>,
    student_logits: &[Tensor],
    teacher_logits: &[Vec<f64>],
    center: &[f64],
    student_temp: f64,
    teacher_temp: f64,
) -> Result<Tensor, TrainError> {
    if student_temp <= 0.0 || teacher_temp <= 0.0 {
        return Err(TrainError::BadTemperature(student_temp.min(teacher_temp)));
    }
    let n_global = teacher_logits.len();
    let mut terms: Option<Tensor> = None;
    let mut n_pairs = 0usize;
    let inv_temp = S::of_f64(1.0 / student_temp);
    for (g, t_logits) in teacher_logits.iter().enumerate() {
        let probs = teacher_probs(t_logits, center, teacher_temp);
        let probs_s: Vec<S> = probs.iter().map(|&p| S::of_f64(p)).collect();
        for (v, s_logits) in student_logits.iter().enumerate() {
            if v == g {
                continue;
            }
            let scaled = tape.mul_scalar(s_logits, inv_temp)?;
            let log_p = tape.log_softmax(&scaled, 0)?;
            let p = tape.constant(probs_s.clone(), &[probs_s.len()])?;
            let weighted = tape.mul(&log_p, &p)?;
            let ce = tape.neg(&tape.sum_all(&weighted)?)?;
            terms = Some(match terms {
                None => ce,
                Some(acc) => tape.add(&acc, &ce)?,
            });
            n_pairs += 1;
        }
    }
    let _ = n_global;
    let total = terms.expect("at least one teacher/student pair");
    Ok(tape.mul_scalar(&total, S::of_f64(1.0 / n_pairs as f64))?)
}
