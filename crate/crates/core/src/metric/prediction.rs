//! Prediction distributions derived from logits: the scale-invariant max-abs
//! normalization, softmax, and KL divergence between them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PROB_FLOOR: f64 = 1e-6;

/// A probability vector produced by [`normalize_prediction`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPrediction {
    pub probs: Vec<f64>,
    /// All logits were zero, so the uniform distribution was substituted.
    pub degenerate: bool,
}

/// Which logits-to-distribution map the divergence is measured on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictionMode {
    /// `F~ = F / max|F| + 1`, `P = F~ / sum(F~)`, then floored.
    Normalized { floor: f64 },
    /// Plain softmax, evaluated in log space (no floor needed).
    Softmax,
}

impl PredictionMode {
    pub fn normalized() -> Self {
        PredictionMode::Normalized {
            floor: DEFAULT_PROB_FLOOR,
        }
    }

    /// Reference distribution for a logit vector under this mode.
    pub fn distribution(&self, logits: &[f64]) -> Vec<f64> {
        match *self {
            PredictionMode::Normalized { floor } => apply_floor(&max_abs_normalize(logits).0, floor),
            PredictionMode::Softmax => softmax(logits),
        }
    }

    /// `D_KL(reference || mode(logits))` and its gradient with respect to
    /// the logits. The flag marks a kink (tie in `max|F|`, or all-zero logits).
    pub fn kl_and_grad(&self, reference: &[f64], logits: &[f64]) -> (f64, Vec<f64>, bool) {
        match *self {
            PredictionMode::Softmax => {
                let logq = log_softmax(logits);
                let value = reference
                    .iter()
                    .zip(&logq)
                    .filter(|(&p, _)| p > 0.0)
                    .map(|(&p, &lq)| p * (p.ln() - lq))
                    .sum::<f64>();
                let psum: f64 = reference.iter().sum();
                let grad = logq
                    .iter()
                    .zip(reference)
                    .map(|(&lq, &p)| lq.exp() * psum - p)
                    .collect();
                (value.max(0.0), grad, false)
            }
            PredictionMode::Normalized { floor } => {
                let k = logits.len();
                let (raw, degenerate) = max_abs_normalize(logits);
                let q = apply_floor(&raw, floor);
                let value = kl_unchecked(reference, &q);
                if degenerate {
                    return (value, vec![0.0; k], true);
                }
                let (m_idx, tie) = max_abs_index(logits);
                let m = logits[m_idx].abs();
                let s: f64 = logits.iter().map(|z| z / m + 1.0).sum();
                // dD/dr_i through the floor renormalization
                let renorm = 1.0 + k as f64 * floor;
                let a: Vec<f64> = reference
                    .iter()
                    .zip(&q)
                    .map(|(&p, &qi)| -p / qi / renorm)
                    .collect();
                let ar: f64 = a.iter().zip(&raw).map(|(ai, ri)| ai * ri).sum();
                let g_f: Vec<f64> = a.iter().map(|ai| (ai - ar) / s).collect();
                let gz: f64 = g_f.iter().zip(logits).map(|(g, z)| g * z).sum();
                let mut grad: Vec<f64> = g_f.iter().map(|g| g / m).collect();
                grad[m_idx] -= gz / (m * m) * logits[m_idx].signum();
                (value, grad, tie)
            }
        }
    }
}

/// `F~ = F / max|F| + 1`, `P = F~ / sum(F~)`. Returns the unfloored
/// distribution and whether the all-zero degeneracy was hit.
pub fn max_abs_normalize(logits: &[f64]) -> (Vec<f64>, bool) {
    let k = logits.len();
    let m = logits.iter().fold(0.0_f64, |m, z| m.max(z.abs()));
    if m == 0.0 {
        return (vec![1.0 / k as f64; k], true);
    }
    let shifted: Vec<f64> = logits.iter().map(|z| z / m + 1.0).collect();
    let s: f64 = shifted.iter().sum();
    (shifted.iter().map(|f| f / s).collect(), false)
}

/// Smallest index attaining `max|z|`, and whether another index ties it.
fn max_abs_index(z: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, v) in z.iter().enumerate().skip(1) {
        if v.abs() > z[best].abs() {
            best = i;
            tie = false;
        } else if v.abs() == z[best].abs() {
            tie = true;
        }
    }
    (best, tie)
}

/// `(p + floor) / (1 + K * floor)`: keeps every entry strictly positive.
pub fn apply_floor(p: &[f64], floor: f64) -> Vec<f64> {
    let renorm = 1.0 + p.len() as f64 * floor;
    p.iter().map(|v| (v + floor) / renorm).collect()
}

/// Scale-invariant prediction normalization followed by the probability
/// floor. Positive rescaling of the logits leaves the output unchanged.
pub fn normalize_prediction(logits: &Tensor, floor: f64) -> Result<NormalizedPrediction> {
    if logits.len() < 2 {
        return Err(Error::Config("need at least two logits".into()));
    }
    if !(floor > 0.0 && floor <= 1e-3) {
        return Err(Error::Config(format!("probability floor {floor} outside (0, 1e-3]")));
    }
    let (raw, degenerate) = max_abs_normalize(logits.data());
    Ok(NormalizedPrediction {
        probs: apply_floor(&raw, floor),
        degenerate,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `D_KL(p || q) = sum p_i ln(p_i / q_i)` over floored distributions.
pub fn kl_divergence(p: &NormalizedPrediction, q: &NormalizedPrediction) -> Result<f64> {
    kl_divergence_slices(&p.probs, &q.probs)
}

pub fn kl_divergence_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: vec![p.len()],
            actual: vec![q.len()],
        });
    }
    Ok(kl_unchecked(p, q))
}
