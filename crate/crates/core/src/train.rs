//! Mini-batch SGD trainers for natural and defended models.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{project, random_start};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metric::prediction::softmax;
use crate::nn::{LayerSpec, Network, ParamGrads, ScalarObjective};
use crate::tensor::sign;

/// Layer stack plus the per-sample input shape it consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            input_shape: vec![input],
            layers: crate::nn::mlp_layers(input, hidden, classes),
        }
    }

    /// Two strided 5x5 convolutions and a dense head on 28x28 inputs.
    pub fn lenet_small(classes: usize) -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 8, kernel: 5, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_ch: 8, out_ch: 16, kernel: 5, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 256, out_dim: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 64, out_dim: classes },
            ],
        }
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { in_dim, out_dim } => format!("dense({in_dim}->{out_dim})"),
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride } => {
                    format!("conv2d({in_ch}->{out_ch},k{kernel},s{stride})")
                }
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::Relu => "relu".into(),
            })
            .collect();
        format!("input{:?} {}", self.input_shape, parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    Natural,
    /// Half clean, half single-step FGSM examples at `epsilon`.
    AdvFgsm {
        epsilon: f64,
        #[serde(default)]
        warmup_epochs: usize,
    },
    /// Train on PGD examples (random start, `steps` iterations, step size
    /// relative to the current budget).
    Minmax {
        epsilon: f64,
        steps: usize,
        step_size: f64,
        #[serde(default)]
        warmup_epochs: usize,
    },
    /// Teacher and student trained at `temperature`; the student is returned.
    Distill {
        temperature: f64,
        #[serde(default)]
        student_epochs: Option<usize>,
    },
    /// Cross-entropy plus `lambda * |grad_x CE|^2`.
    Gradreg {
        lambda: f64,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
    },
}

fn default_fd_step() -> f64 {
    1e-2
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Natural => "natural",
            Regime::AdvFgsm { .. } => "adv_fgsm",
            Regime::Minmax { .. } => "minmax",
            Regime::Distill { .. } => "distill",
            Regime::Gradreg { .. } => "gradreg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

/// Parameter update rule. Adam uses the usual `beta1 = 0.9`,
/// `beta2 = 0.999`, `eps = 1e-8` with bias correction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl TrainConfig {
    pub fn natural(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            regime: Regime::Natural,
            epochs,
            batch_size,
            learning_rate,
            seed,
            optimizer: Optimizer::Sgd,
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        match self.regime {
            Regime::AdvFgsm { epsilon, .. } if !(0.0..=1.0).contains(&epsilon) => {
                bad(format!("epsilon {epsilon} outside [0, 1]"))
            }
            Regime::Minmax { epsilon, steps, step_size, .. } => {
                if !(0.0..=1.0).contains(&epsilon) {
                    bad(format!("epsilon {epsilon} outside [0, 1]"))
                } else if steps == 0 || (epsilon > 0.0 && !(step_size > 0.0)) {
                    bad("minmax needs positive steps and step size".into())
                } else {
                    Ok(())
                }
            }
            Regime::Distill { temperature, .. } if !(temperature >= 1.0) => {
                bad(format!("temperature {temperature} must be at least 1"))
            }
            Regime::Gradreg { lambda, fd_step } if !(lambda >= 0.0) || !(fd_step > 0.0) => {
                bad("gradreg needs lambda >= 0 and a positive fd_step".into())
            }
            _ => Ok(()),
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

fn check_arch(arch: &Architecture, data: &Dataset) -> Result<()> {
    let d: usize = arch.input_shape.iter().product();
    if d != data.sample_len() {
        return Err(Error::Shape {
            expected: arch.input_shape.clone(),
            actual: data.sample_shape().to_vec(),
        });
    }
    Ok(())
}

/// Trains a model under `config.regime`. Distillation is routed to
/// [`train_distilled`].
pub fn train(config: &TrainConfig, data: &Dataset, arch: &Architecture) -> Result<Network> {
    Ok(train_logged(config, data, arch)?.0)
}

pub fn train_logged(config: &TrainConfig, data: &Dataset, arch: &Architecture) -> Result<(Network, TrainLog)> {
    config.validate()?;
    check_arch(arch, data)?;
    if let Regime::Distill { .. } = config.regime {
        return train_distilled_logged(config, data, arch);
    }
    let mut rng = crate::rng(config.seed);
    let mut net = Network::init(arch.input_shape.clone(), data.num_classes(), arch.layers.clone(), &mut rng)?;
    let log = sgd(&mut net, config, data, &mut rng, &|net, batch, epoch, rng| {
        regime_step(net, &config.regime, data, batch, epoch, rng)
    })?;
    stamp(&mut net, config, arch, data);
    Ok((net, log))
}

fn stamp(net: &mut Network, config: &TrainConfig, arch: &Architecture, data: &Dataset) {
    let p = &mut net.provenance;
    p.insert("regime".into(), config.regime.name().into());
    p.insert(
        "train_config".into(),
        serde_json::to_string(config).unwrap_or_default(),
    );
    p.insert("architecture".into(), arch.describe());
    p.insert("train_samples".into(), data.len().to_string());
    p.insert("seed".into(), config.seed.to_string());
}

type StepFn<'a> = dyn Fn(&Network, &[usize], usize, &mut crate::Rng) -> Result<(f64, ParamGrads)> + Sync + 'a;

fn sgd(
    net: &mut Network,
    config: &TrainConfig,
    data: &Dataset,
    rng: &mut crate::Rng,
    step: &StepFn,
) -> Result<TrainLog> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut adam = match config.optimizer {
        Optimizer::Adam => Some(Adam::new(net)),
        Optimizer::Sgd => None,
    };
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = match step(net, batch, epoch, rng) {
                Ok(v) => v,
                Err(Error::NumericOverflow { .. }) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::TrainingDiverged { epoch })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            match adam.as_mut() {
                Some(adam) => adam.update(net, &grads, config.learning_rate),
                None => {
                    for (p, g) in net.params_mut().iter_mut().zip(&grads.layers) {
                        for (w, d) in p.weight.iter_mut().zip(&g.weight) {
                            *w -= config.learning_rate * d;
                        }
                        for (b, d) in p.bias.iter_mut().zip(&g.bias) {
                            *b -= config.learning_rate * d;
                        }
                    }
                }
            }
            if net.params().iter().any(|p| p.values().any(|v| !v.is_finite())) {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss;
            batches += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok(log)
}

struct Adam {
    m: ParamGrads,
    v: ParamGrads,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Network) -> Self {
        Self {
            m: ParamGrads::zeros_for(net),
            v: ParamGrads::zeros_for(net),
            t: 0,
        }
    }

    fn update(&mut self, net: &mut Network, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let step = |w: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        let layers = net.params_mut().iter_mut().zip(&grads.layers).zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()));
        for ((p, g), (m, v)) in layers {
            for (((w, &d), mi), vi) in p.weight.iter_mut().zip(&g.weight).zip(m.weight.iter_mut()).zip(v.weight.iter_mut()) {
                step(w, d, mi, vi);
            }
            for (((b, &d), mi), vi) in p.bias.iter_mut().zip(&g.bias).zip(m.bias.iter_mut()).zip(v.bias.iter_mut()) {
                step(b, d, mi, vi);
            }
        }
    }
}

fn fgsm_batch(net: &Network, clean: &[&[f64]], ce: &[ScalarObjective], epsilon: f64) -> Result<Vec<Vec<f64>>> {
    let grads = net.input_gradient_batch(clean, ce)?;
    Ok(clean
        .iter()
        .zip(grads)
        .map(|(x, (_, g, _))| {
            let mut adv: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + epsilon * sign(*gi)).collect();
            project(x, &mut adv, epsilon);
            adv
        })
        .collect())
}

/// [`pgd_example`] run in lockstep over a batch.
fn pgd_batch(
    net: &Network,
    clean: &[&[f64]],
    ce: &[ScalarObjective],
    epsilon: f64,
    steps: usize,
    step_size: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    let mut adv: Vec<Vec<f64>> = clean.iter().zip(seeds).map(|(x, &s)| random_start(x, epsilon, s)).collect();
    for _ in 0..steps {
        let views: Vec<&[f64]> = adv.iter().map(Vec::as_slice).collect();
        let grads = net.input_gradient_batch(&views, ce)?;
        for ((a, x), (_, g, _)) in adv.iter_mut().zip(clean).zip(grads) {
            for (ai, gi) in a.iter_mut().zip(&g) {
                *ai += step_size * sign(*gi);
            }
            project(x, a, epsilon);
        }
    }
    Ok(adv)
}

/// PGD maximizing the cross-entropy, returning the final iterate.
pub fn pgd_example(net: &Network, x: &[f64], label: usize, epsilon: f64, steps: usize, step_size: f64, seed: u64) -> Result<Vec<f64>> {
    let mut adv = random_start(x, epsilon, seed);
    let ce = ScalarObjective::cross_entropy(label);
    for _ in 0..steps {
        let (_, g, _) = net.input_gradient_flat(&adv, &ce)?;
        for (a, gi) in adv.iter_mut().zip(&g) {
            *a += step_size * sign(*gi);
        }
        project(x, &mut adv, epsilon);
    }
    Ok(adv)
}

fn regime_step(
    net: &Network,
    regime: &Regime,
    data: &Dataset,
    batch: &[usize],
    epoch: usize,
    rng: &mut crate::Rng,
) -> Result<(f64, ParamGrads)> {
    let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
    let clean: Vec<&[f64]> = batch.iter().map(|&i| data.image(i)).collect();
    let ce: Vec<ScalarObjective> = labels.iter().map(|&l| ScalarObjective::cross_entropy(l)).collect();
    match *regime {
        Regime::Natural
        | Regime::AdvFgsm { epsilon: 0.0, .. }
        | Regime::Minmax { epsilon: 0.0, .. }
        | Regime::Gradreg { lambda: 0.0, .. } => net.param_gradient(&clean, &ce),
        Regime::AdvFgsm { epsilon, warmup_epochs } => {
            let epsilon = warmup(epsilon, warmup_epochs, epoch);
            let adv = fgsm_batch(net, &clean, &ce, epsilon)?;
            let mut inputs = clean.clone();
            inputs.extend(adv.iter().map(Vec::as_slice));
            let mut objectives = ce.clone();
            objectives.extend(ce.iter().copied());
            net.param_gradient(&inputs, &objectives)
        }
        Regime::Minmax { epsilon, steps, step_size, warmup_epochs } => {
            let scale = warmup(1.0, warmup_epochs, epoch);
            let (epsilon, step_size) = (epsilon * scale, step_size * scale);
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let adv = pgd_batch(net, &clean, &ce, epsilon, steps, step_size, &seeds)?;
            let inputs: Vec<&[f64]> = adv.iter().map(Vec::as_slice).collect();
            net.param_gradient(&inputs, &ce)
        }
        Regime::Gradreg { lambda, fd_step } => gradreg_step(net, &clean, &ce, lambda, fd_step),
        Regime::Distill { .. } => unreachable!("distillation is trained by train_distilled"),
    }
}

/// Budget for `epoch` under a linear ramp reaching `epsilon` at epoch
/// `warmup_epochs - 1`.
fn warmup(epsilon: f64, warmup_epochs: usize, epoch: usize) -> f64 {
    if warmup_epochs == 0 {
        epsilon
    } else {
        epsilon * ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0)
    }
}

/// Parameter gradient of `CE + lambda * |g|^2`, `g = grad_x CE`.
///
/// `grad_theta |g|^2 = 2 * d/dh grad_theta CE(x + h g)` at `h = 0`; with
/// `u = g / |g|` this is approximated by the forward difference
/// `2 |g| (grad_theta CE(x + h u) - grad_theta CE(x)) / h`.
fn gradreg_step(
    net: &Network,
    clean: &[&[f64]],
    ce: &[ScalarObjective],
    lambda: f64,
    fd_step: f64,
) -> Result<(f64, ParamGrads)> {
    let n = clean.len();
    let probes = (0..n)
        .into_par_iter()
        .map(|k| -> Result<(Vec<f64>, f64)> {
            let (_, g, _) = net.input_gradient_flat(clean[k], &ce[k])?;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let shifted = if norm > 0.0 {
                clean[k].iter().zip(&g).map(|(x, gi)| x + fd_step * gi / norm).collect()
            } else {
                clean[k].to_vec()
            };
            Ok((shifted, norm))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut inputs: Vec<&[f64]> = clean.to_vec();
    inputs.extend(probes.iter().map(|(s, _)| s.as_slice()));
    let mut objectives = ce.to_vec();
    objectives.extend(ce.iter().copied());
    let mut weights: Vec<f64> = probes.iter().map(|(_, norm)| 1.0 - 2.0 * lambda * norm / fd_step).collect();
    weights.extend(probes.iter().map(|(_, norm)| 2.0 * lambda * norm / fd_step));
    let (_, mut grads) = net.param_gradient_weighted(&inputs, &objectives, &weights)?;
    grads.scale(1.0 / n as f64);
    let (loss, _) = net.param_gradient(clean, ce)?;
    let penalty = probes.iter().map(|(_, norm)| norm * norm).sum::<f64>() / n as f64;
    Ok((loss + lambda * penalty, grads))
}

/// Defensive distillation: a teacher trained at temperature `T` labels the
/// training set with `softmax(Z / T)`; a student of the same architecture is
/// trained on those soft labels at the same temperature and returned. At
/// inference the student runs at temperature 1.
pub fn train_distilled(config: &TrainConfig, data: &Dataset, arch: &Architecture) -> Result<Network> {
    Ok(train_distilled_logged(config, data, arch)?.0)
}

fn train_distilled_logged(config: &TrainConfig, data: &Dataset, arch: &Architecture) -> Result<(Network, TrainLog)> {
    config.validate()?;
    check_arch(arch, data)?;
    let Regime::Distill { temperature, student_epochs } = config.regime else {
        return Err(Error::Config("train_distilled needs the distill regime".into()));
    };
    let mut rng = crate::rng(config.seed);
    let mut teacher = Network::init(arch.input_shape.clone(), data.num_classes(), arch.layers.clone(), &mut rng)?;
    sgd(&mut teacher, config, data, &mut rng, &|net, batch, _, _| {
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.image(i)).collect();
        let obj: Vec<ScalarObjective> = batch
            .iter()
            .map(|&i| ScalarObjective::CrossEntropy { label: data.label(i), temperature })
            .collect();
        net.param_gradient(&inputs, &obj)
    })?;

    let soft = soft_labels(&teacher, data, temperature)?;
    let mut student = Network::init(arch.input_shape.clone(), data.num_classes(), arch.layers.clone(), &mut rng)?;
    let student_config = TrainConfig {
        epochs: student_epochs.unwrap_or(config.epochs),
        ..config.clone()
    };
    let log = sgd(&mut student, &student_config, data, &mut rng, &|net, batch, _, _| {
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.image(i)).collect();
        let obj: Vec<ScalarObjective> = batch
            .iter()
            .map(|&i| ScalarObjective::SoftCrossEntropy { target: &soft[i], temperature })
            .collect();
        net.param_gradient(&inputs, &obj)
    })?;
    stamp(&mut student, config, arch, data);
    Ok((student, log))
}

/// `softmax(Z(x) / T)` for every sample.
pub fn soft_labels(net: &Network, data: &Dataset, temperature: f64) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let z: Vec<f64> = net.logits(data.image(i))?.iter().map(|v| v / temperature).collect();
            Ok(softmax(&z))
        })
        .collect()
}

/// Fraction of samples whose argmax matches the label.
pub fn clean_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| Ok((net.predict(data.image(i))? == data.label(i)) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Dataset {
        crate::data::gaussian_blobs(300, 3, 0.05, &mut crate::rng(4))
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[], 3);
        let net = train(&TrainConfig::natural(60, 16, 0.5, 1), &data, &arch).unwrap();
        assert!(clean_accuracy(&net, &data).unwrap() >= 0.99);
        assert_eq!(net.provenance["regime"], "natural");
    }

    #[test]
    fn zero_budget_regimes_match_natural() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let base = TrainConfig::natural(3, 32, 0.1, 9);
        let (natural, log) = train_logged(&base, &data, &arch).unwrap();
        for regime in [
            Regime::AdvFgsm { epsilon: 0.0, warmup_epochs: 0 },
            Regime::Minmax { epsilon: 0.0, steps: 5, step_size: 0.1, warmup_epochs: 2 },
            Regime::Gradreg { lambda: 0.0, fd_step: 1e-2 },
        ] {
            let (net, l) = train_logged(&base.clone().with_regime(regime), &data, &arch).unwrap();
            assert_eq!(net.params(), natural.params());
            assert_eq!(l, log);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let cfg = TrainConfig::natural(2, 16, 0.1, 3).with_regime(Regime::Minmax {
            epsilon: 0.1,
            steps: 3,
            step_size: 0.05,
            warmup_epochs: 1,
        });
        assert_eq!(train(&cfg, &data, &arch).unwrap(), train(&cfg, &data, &arch).unwrap());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let cfg = TrainConfig::natural(2, 16, 1e300, 3);
        assert!(matches!(train(&cfg, &data, &arch), Err(Error::TrainingDiverged { epoch: 0 })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let base = TrainConfig::natural(1, 16, 0.1, 3);
        for regime in [
            Regime::AdvFgsm { epsilon: -0.1, warmup_epochs: 0 },
            Regime::Distill { temperature: 0.5, student_epochs: None },
            Regime::Gradreg { lambda: -1.0, fd_step: 0.01 },
        ] {
            assert!(train(&base.clone().with_regime(regime), &data, &arch).is_err());
        }
        assert!(train(&base, &data, &Architecture::mlp(3, &[], 3)).is_err());
    }

    #[test]
    fn unit_temperature_soft_labels_are_teacher_softmax() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let net = train(&TrainConfig::natural(2, 16, 0.1, 3), &data, &arch).unwrap();
        let soft = soft_labels(&net, &data, 1.0).unwrap();
        assert_eq!(soft[5], softmax(&net.logits(data.image(5)).unwrap()));
    }

    #[test]
    fn zero_student_epochs_keep_initialization() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let cfg = TrainConfig::natural(2, 16, 0.1, 3).with_regime(Regime::Distill {
            temperature: 10.0,
            student_epochs: Some(0),
        });
        let student = train_distilled(&cfg, &data, &arch).unwrap();
        // replay the rng: teacher init, teacher epochs, then student init
        let mut rng = crate::rng(3);
        let mut teacher = Network::init(vec![2], 3, arch.layers.clone(), &mut rng).unwrap();
        let t_cfg = cfg.clone();
        sgd(&mut teacher, &t_cfg, &data, &mut rng, &|net, batch, _, _| {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| data.image(i)).collect();
            let obj: Vec<ScalarObjective> = batch
                .iter()
                .map(|&i| ScalarObjective::CrossEntropy { label: data.label(i), temperature: 10.0 })
                .collect();
            net.param_gradient(&inputs, &obj)
        })
        .unwrap();
        let init = Network::init(vec![2], 3, arch.layers.clone(), &mut rng).unwrap();
        assert_eq!(student.params(), init.params());
        assert_eq!(
            clean_accuracy(&student, &data).unwrap(),
            clean_accuracy(&init, &data).unwrap()
        );
    }

    #[test]
    fn huge_penalty_flattens_the_model() {
        let data = blobs();
        let arch = Architecture::mlp(2, &[8], 3);
        let natural = train(&TrainConfig::natural(5, 16, 0.1, 3), &data, &arch).unwrap();
        let cfg = TrainConfig::natural(5, 16, 1e-7, 3).with_regime(Regime::Gradreg { lambda: 1e6, fd_step: 1e-3 });
        let flat = train(&cfg, &data, &arch).unwrap();
        let grad_norm = |net: &Network| {
            (0..data.len())
                .map(|i| {
                    net.input_gradient(&data.tensor(i), &ScalarObjective::cross_entropy(data.label(i)))
                        .unwrap()
                        .grad
                        .l2_norm()
                })
                .sum::<f64>()
        };
        assert!(grad_norm(&flat) < 0.1 * grad_norm(&natural));
    }
}
