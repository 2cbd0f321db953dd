//! Scalar heads on top of the logit vector. Each head returns its value and
//! its gradient with respect to the logits; the network chains the rest.

use crate::error::{Error, Result};
use crate::metric::prediction::{log_softmax, softmax, PredictionMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub enum ScalarObjective<'a> {
    /// `-log softmax(z / T)[label]`
    CrossEntropy { label: usize, temperature: f64 },
    /// `-sum_i target_i log softmax(z / T)_i` (distillation labels).
    SoftCrossEntropy { target: &'a [f64], temperature: f64 },
    Logit { index: usize },
    /// `z_t - max_{i != t} z_i`
    DecisionValue { label: usize },
    /// `max_{i != t} z_i - z_t`
    CwMargin { label: usize },
    /// `D_KL(reference || P(z))` for the given prediction map.
    KlToReference { reference: &'a [f64], mode: PredictionMode },
    /// `0.5 * |z - target|^2`
    SquaredError { target: &'a [f64] },
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub value: f64,
    pub grad: Vec<f64>,
    /// The head is not differentiable here; `grad` is the declared subgradient.
    pub kink: bool,
}

impl<'a> ScalarObjective<'a> {
    pub fn cross_entropy(label: usize) -> Self {
        ScalarObjective::CrossEntropy {
            label,
            temperature: 1.0,
        }
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<HeadOutput> {
        let k = z.len();
        let check = |label: usize| {
            if label < k {
                Ok(())
            } else {
                Err(Error::Label {
                    label,
                    num_classes: k,
                })
            }
        };
        let smooth = |value, grad| HeadOutput {
            value,
            grad,
            kink: false,
        };
        Ok(match *self {
            ScalarObjective::CrossEntropy { label, temperature } => {
                check(label)?;
                let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
                let value = -log_softmax(&scaled)[label];
                let mut grad = softmax(&scaled);
                grad[label] -= 1.0;
                grad.iter_mut().for_each(|g| *g /= temperature);
                smooth(value, grad)
            }
            ScalarObjective::SoftCrossEntropy {
                target,
                temperature,
            } => {
                if target.len() != k {
                    return Err(Error::Shape {
                        expected: vec![k],
                        actual: vec![target.len()],
                    });
                }
                let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
                let logp = log_softmax(&scaled);
                let value = -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
                let tsum: f64 = target.iter().sum();
                let grad = logp
                    .iter()
                    .zip(target)
                    .map(|(l, t)| (l.exp() * tsum - t) / temperature)
                    .collect();
                smooth(value, grad)
            }
            ScalarObjective::Logit { index } => {
                check(index)?;
                let mut grad = vec![0.0; k];
                grad[index] = 1.0;
                smooth(z[index], grad)
            }
            ScalarObjective::DecisionValue { label } | ScalarObjective::CwMargin { label } => {
                check(label)?;
                let (j, tie) = runner_up(z, label);
                let sign = if matches!(self, ScalarObjective::DecisionValue { .. }) {
                    1.0
                } else {
                    -1.0
                };
                let mut grad = vec![0.0; k];
                grad[label] = sign;
                grad[j] = -sign;
                HeadOutput {
                    value: sign * (z[label] - z[j]),
                    grad,
                    kink: tie,
                }
            }
            ScalarObjective::KlToReference { reference, mode } => {
                if reference.len() != k {
                    return Err(Error::Shape {
                        expected: vec![k],
                        actual: vec![reference.len()],
                    });
                }
                let (value, grad, kink) = mode.kl_and_grad(reference, z);
                HeadOutput { value, grad, kink }
            }
            ScalarObjective::SquaredError { target } => {
                if target.len() != k {
                    return Err(Error::Shape {
                        expected: vec![k],
                        actual: vec![target.len()],
                    });
                }
                let grad: Vec<f64> = z.iter().zip(target).map(|(a, b)| a - b).collect();
                let value = 0.5 * grad.iter().map(|e| e * e).sum::<f64>();
                smooth(value, grad)
            }
        })
    }
}

/// Smallest index among `argmax_{i != t} z_i`, plus whether the max is tied.
pub fn runner_up(z: &[f64], t: usize) -> (usize, bool) {
    let mut best: Option<usize> = None;
    let mut tie = false;
    for (i, &v) in z.iter().enumerate() {
        if i == t {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > z[b] => {
                best = Some(i);
                tie = false;
            }
            Some(b) if v == z[b] => tie = true,
            _ => {}
        }
    }
    (best.expect("at least two classes"), tie)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    Ok(ScalarObjective::cross_entropy(label).evaluate(logits.data())?.value)
}
