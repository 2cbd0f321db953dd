//! Sign-gradient perturbation directions and l-infinity PGD attacks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Network, ScalarObjective, GRAD_CHUNK};
use crate::tensor::{argmax, argmin, sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// `max_{i != t} Z_i - Z_t`
    CwMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targeting {
    None,
    /// Descend the cross-entropy of the least likely class instead.
    LeastLikely,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub loss_kind: LossKind,
    pub targeted: Targeting,
    /// Uniform random start in the ball when set.
    pub seed: Option<u64>,
    /// Return the first iterate (including the start) that is adversarial.
    pub early_stop: bool,
}

impl AttackConfig {
    /// PGD-k on cross-entropy with step `epsilon / 4` and a random start.
    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        Self {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            loss_kind: LossKind::CrossEntropy,
            targeted: Targeting::None,
            seed: Some(seed),
            early_stop: true,
        }
    }

    pub fn cw(epsilon: f64, steps: usize, seed: u64) -> Self {
        Self {
            loss_kind: LossKind::CwMargin,
            ..Self::pgd(epsilon, steps, seed)
        }
    }

    /// One full-budget step along the loss-gradient sign from `x` itself.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 1,
            step_size: epsilon,
            loss_kind: LossKind::CrossEntropy,
            targeted: Targeting::None,
            seed: None,
            early_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "step size {} must lie in (0, epsilon = {}]",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// Prediction differs from the true label (cross-entropy) or the decision
    /// value is negative (CW margin).
    pub success: bool,
    /// Attack loss at every visited iterate, starting point included.
    pub loss_trajectory: Vec<f64>,
    pub decision_value: f64,
    pub prediction: usize,
}

/// beta_0: sign of standard normal noise.
pub fn direction_random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = crate::rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| sign(StandardNormal.sample(&mut rng)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// beta_1: sign of the cross-entropy gradient at the true label.
pub fn direction_fgsm(net: &Network, x: &Tensor, label: usize) -> Result<Tensor> {
    Ok(net
        .input_gradient(x, &ScalarObjective::cross_entropy(label))?
        .grad
        .sign())
}

/// beta_2: sign of the gradient of `log softmax(Z)[l]` for the least likely
/// class `l`.
pub fn direction_least_likely(net: &Network, x: &Tensor) -> Result<Tensor> {
    let l = argmin(&net.logits(x.data())?);
    let g = net.input_gradient(x, &ScalarObjective::cross_entropy(l))?.grad;
    Ok(g.map(|v| -sign(v)))
}

/// beta_3: sign of the gradient of `max_{i != t} Z_i - Z_t`.
pub fn direction_cw(net: &Network, x: &Tensor, label: usize) -> Result<Tensor> {
    Ok(net
        .input_gradient(x, &ScalarObjective::CwMargin { label })?
        .grad
        .sign())
}

/// Clip `v` into the l-infinity ball around `center` and the unit box.
pub(crate) fn project(center: &[f64], v: &mut [f64], epsilon: f64) {
    for (vi, &c) in v.iter_mut().zip(center) {
        *vi = vi.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
    }
}

pub(crate) fn random_start(center: &[f64], epsilon: f64, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng(seed);
    let mut v: Vec<f64> = center
        .iter()
        .map(|&c| c + rng.random_range(-1.0..=1.0) * epsilon)
        .collect();
    project(center, &mut v, epsilon);
    v
}

fn attack_objective(clean_logits: &[f64], label: usize, cfg: &AttackConfig) -> ScalarObjective<'static> {
    match (cfg.loss_kind, cfg.targeted) {
        (LossKind::CwMargin, _) => ScalarObjective::CwMargin { label },
        (LossKind::CrossEntropy, Targeting::None) => ScalarObjective::cross_entropy(label),
        (LossKind::CrossEntropy, Targeting::LeastLikely) => ScalarObjective::cross_entropy(argmin(clean_logits)),
    }
}

/// Projected sign-gradient ascent shared by both attacks.
pub fn run_attack(net: &Network, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    net.check_tensor(x)?;
    let (adv, trajectory, logits) = run_attack_many(net, &[x.data()], &[label], &[cfg.seed], cfg)?
        .pop()
        .expect("one sample in, one out");
    Ok(AttackResult {
        success: is_adversarial(&logits, label, cfg),
        decision_value: decision_from_logits(&logits, label),
        prediction: argmax(&logits),
        adversarial: x.with_data(adv),
        loss_trajectory: trajectory,
    })
}

fn is_adversarial(logits: &[f64], label: usize, cfg: &AttackConfig) -> bool {
    match cfg.loss_kind {
        LossKind::CrossEntropy => argmax(logits) != label,
        LossKind::CwMargin => decision_from_logits(logits, label) < 0.0,
    }
}

/// Attack loop over several samples in lockstep. Rows that stop early drop
/// out of the batch. Returns `(adversarial, loss trajectory, final logits)`.
#[allow(clippy::type_complexity)]
fn run_attack_many(
    net: &Network,
    centers: &[&[f64]],
    labels: &[usize],
    seeds: &[Option<u64>],
    cfg: &AttackConfig,
) -> Result<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> {
    for &label in labels {
        if label >= net.num_classes() {
            return Err(Error::Label {
                label,
                num_classes: net.num_classes(),
            });
        }
    }
    let clean = net.logits_batch(centers)?;
    let objectives: Vec<ScalarObjective> = labels
        .iter()
        .zip(&clean)
        .map(|(&label, z)| attack_objective(z, label, cfg))
        .collect();
    let ascend = if matches!(cfg.targeted, Targeting::LeastLikely) && cfg.loss_kind == LossKind::CrossEntropy {
        -1.0
    } else {
        1.0
    };

    let mut current: Vec<Vec<f64>> = centers
        .iter()
        .zip(seeds)
        .map(|(c, seed)| match seed {
            Some(seed) if cfg.epsilon > 0.0 => random_start(c, cfg.epsilon, *seed),
            _ => c.to_vec(),
        })
        .collect();
    let mut trajectories = vec![Vec::with_capacity(cfg.steps + 1); centers.len()];
    let mut active: Vec<usize> = (0..centers.len()).collect();
    let steps = if cfg.epsilon > 0.0 { cfg.steps } else { 0 };
    for step in 0..=steps {
        if active.is_empty() {
            break;
        }
        let views: Vec<&[f64]> = active.iter().map(|&k| current[k].as_slice()).collect();
        let trace = net.trace_batch(&views)?;
        let mut g = Vec::with_capacity(active.len() * net.num_classes());
        let mut keep = Vec::with_capacity(active.len());
        for (row, &k) in active.iter().enumerate() {
            let z = trace.logits(row);
            let head = objectives[k].evaluate(z)?;
            trajectories[k].push(head.value);
            let done = step == steps || (cfg.early_stop && is_adversarial(z, labels[k], cfg));
            keep.push(!done);
            g.extend(head.grad.iter().map(|v| if done { 0.0 } else { *v }));
        }
        if keep.iter().all(|k| !k) {
            break;
        }
        let grads = net.backward_batch(&trace, &g, true, None);
        let d = net.input_len();
        for (row, &k) in active.iter().enumerate() {
            if !keep[row] {
                continue;
            }
            for (c, gi) in current[k].iter_mut().zip(&grads[row * d..(row + 1) * d]) {
                *c += cfg.step_size * ascend * sign(*gi);
            }
            project(centers[k], &mut current[k], cfg.epsilon);
        }
        active = active.into_iter().zip(keep).filter_map(|(k, on)| on.then_some(k)).collect();
    }

    let views: Vec<&[f64]> = current.iter().map(Vec::as_slice).collect();
    let logits = net.logits_batch(&views)?;
    for (adv, center) in current.iter().zip(centers) {
        let used = adv.iter().zip(*center).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(
            used <= cfg.epsilon + 1e-12 && adv.iter().all(|v| (0.0..=1.0).contains(v)),
            "attack left the feasible set: linf {used} > {}",
            cfg.epsilon
        );
    }
    Ok(current
        .into_iter()
        .zip(trajectories)
        .zip(logits)
        .map(|((a, t), z)| (a, t, z))
        .collect())
}

pub(crate) fn decision_from_logits(z: &[f64], label: usize) -> f64 {
    let (j, _) = crate::nn::objective::runner_up(z, label);
    z[label] - z[j]
}

/// PGD on the cross-entropy loss.
pub fn pgd_attack(net: &Network, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if cfg.loss_kind != LossKind::CrossEntropy {
        return Err(Error::Config("pgd_attack requires the cross-entropy loss".into()));
    }
    run_attack(net, x, label, cfg)
}

/// PGD on the CW margin loss.
pub fn cw_attack(net: &Network, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if cfg.loss_kind != LossKind::CwMargin {
        return Err(Error::Config("cw_attack requires the CW margin loss".into()));
    }
    run_attack(net, x, label, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub sample_id: usize,
    pub true_label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub success: bool,
    pub linf_used: f64,
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub accuracy: f64,
    pub outcomes: Vec<SampleOutcome>,
}

impl AttackReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,true_label,clean_pred,adv_pred,success,linf_used\n");
        for o in &self.outcomes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                o.sample_id, o.true_label, o.clean_pred, o.adv_pred, o.success, o.linf_used
            );
        }
        out
    }
}

/// Attacks every sample; per-sample seeds are `seed ^ index`.
pub fn evaluate_attack(net: &Network, data: &Dataset, cfg: &AttackConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let outcomes = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<Vec<SampleOutcome>> {
            let centers: Vec<&[f64]> = chunk.iter().map(|&i| data.image(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let seeds: Vec<Option<u64>> = chunk.iter().map(|&i| cfg.seed.map(|s| s ^ i as u64)).collect();
            let clean = net.logits_batch(&centers)?;
            let results = run_attack_many(net, &centers, &labels, &seeds, cfg)?;
            Ok(chunk
                .iter()
                .zip(results)
                .zip(clean)
                .map(|((&i, (adv, _, z)), z0)| SampleOutcome {
                    sample_id: i,
                    true_label: data.label(i),
                    clean_pred: argmax(&z0),
                    adv_pred: argmax(&z),
                    success: is_adversarial(&z, data.label(i), cfg),
                    linf_used: adv.iter().zip(data.image(i)).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())),
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let robust = outcomes.iter().filter(|o| !o.success).count();
    Ok(AttackReport {
        accuracy: robust as f64 / data.len().max(1) as f64,
        outcomes,
    })
}

/// Fraction of samples the attack fails to break.
pub fn adversarial_accuracy(net: &Network, data: &Dataset, cfg: &AttackConfig) -> Result<f64> {
    Ok(evaluate_attack(net, data, cfg)?.accuracy)
}
