//! The robustness score `psi`: the inverse of the largest KL divergence
//! between a model's prediction on an input and on any perturbation inside
//! an l-infinity ball.
//!
//! Predictions are compared after the max-abs normalization in
//! [`prediction`], which makes the score invariant to positive rescaling of
//! the logit layer. The softmax variant ([`psi_unnormalized`]) and input-space
//! epsilon-sharpness are kept as non-invariant baselines.

pub mod prediction;

use rand::Rng as _;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::attacks::{project, random_start};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, ScalarObjective, GRAD_CHUNK};
use crate::tensor::{sign, Tensor};

pub use prediction::{
    kl_divergence, normalize_prediction, NormalizedPrediction, PredictionMode, DEFAULT_PROB_FLOOR,
};

/// Mean divergences below this saturate the score.
pub const SATURATION_FLOOR: f64 = 1e-12;
pub const PSI_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub epsilon: f64,
    pub ascent_steps: usize,
    pub ascent_step_size: f64,
    /// Total starts, the zero start included.
    pub restarts: usize,
    pub prob_floor: f64,
    pub seed: u64,
}

impl MetricConfig {
    /// 100 sign-ascent steps of `epsilon / 10`, zero start plus three random.
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            ascent_steps: 100,
            ascent_step_size: epsilon / 10.0,
            restarts: 4,
            prob_floor: DEFAULT_PROB_FLOOR,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.restarts == 0 || self.ascent_steps == 0 {
            return Err(Error::Config("restarts and ascent steps must be positive".into()));
        }
        if self.epsilon > 0.0 && self.ascent_step_size <= 0.0 {
            return Err(Error::Config("ascent step size must be positive".into()));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor <= 1e-3) {
            return Err(Error::Config(format!(
                "probability floor {} outside (0, 1e-3]",
                self.prob_floor
            )));
        }
        Ok(())
    }

    fn mode(&self, normalized: bool) -> PredictionMode {
        if normalized {
            PredictionMode::Normalized {
                floor: self.prob_floor,
            }
        } else {
            PredictionMode::Softmax
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxKl {
    pub value: f64,
    pub delta: Tensor,
    /// Best value reached from each start, zero start first.
    pub per_start: Vec<f64>,
}

const WALK_SALT: u64 = 0x6A09_E667_F3BC_C908;

fn start_seed(seed: u64, start: usize) -> u64 {
    seed.wrapping_add((start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Projected sign-gradient ascent on `delta -> D_KL(P(x) || P(x + delta))`.
pub fn max_kl(net: &Network, x: &Tensor, cfg: &MetricConfig) -> Result<MaxKl> {
    max_kl_with(net, x, cfg, cfg.mode(true))
}

pub fn max_kl_with(net: &Network, x: &Tensor, cfg: &MetricConfig, mode: PredictionMode) -> Result<MaxKl> {
    cfg.validate()?;
    net.check_tensor(x)?;
    let mut out = max_kl_many(net, &[x.data()], &[cfg.seed], cfg, mode)?;
    let (value, delta, per_start) = out.pop().expect("one sample in, one out");
    Ok(MaxKl {
        value,
        delta: x.with_data(delta),
        per_start,
    })
}

/// Lockstep ascent for several centers at once; every (sample, start) pair
/// is one row of the batched forward pass. Returns `(value, delta,
/// per_start)` per center.
fn max_kl_many(
    net: &Network,
    centers: &[&[f64]],
    seeds: &[u64],
    cfg: &MetricConfig,
    mode: PredictionMode,
) -> Result<Vec<(f64, Vec<f64>, Vec<f64>)>> {
    let zero = |c: &[f64]| (0.0, vec![0.0; c.len()], vec![0.0]);
    if cfg.epsilon == 0.0 {
        return Ok(centers.iter().map(|c| zero(c)).collect());
    }
    let references: Vec<Vec<f64>> = net
        .logits_batch(centers)?
        .iter()
        .map(|z| mode.distribution(z))
        .collect();
    let r = cfg.restarts;
    let objectives: Vec<ScalarObjective> = (0..centers.len() * r)
        .map(|row| ScalarObjective::KlToReference {
            reference: &references[row / r],
            mode,
        })
        .collect();
    let mut points: Vec<Vec<f64>> = (0..centers.len() * r)
        .map(|row| {
            let (i, start) = (row / r, row % r);
            if start == 0 {
                centers[i].to_vec()
            } else {
                random_start(centers[i], cfg.epsilon, start_seed(seeds[i], start))
            }
        })
        .collect();
    let mut best: Vec<(f64, Vec<f64>)> = centers.iter().map(|c| (0.0, c.to_vec())).collect();
    let mut per_start = vec![f64::NEG_INFINITY; points.len()];
    // Per-row random walk on flat spots: a generator and the sign direction
    // currently followed.
    let mut walkers: Vec<Option<(crate::Rng, Vec<f64>)>> = vec![None; points.len()];
    let start_of = |row: usize| row % r;
    for step in 0..=cfg.ascent_steps {
        let views: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
        let heads = net.input_gradient_batch(&views, &objectives)?;
        for (row, (value, grad, _)) in heads.into_iter().enumerate() {
            let i = row / r;
            if value > per_start[row] {
                per_start[row] = value;
                if value > best[i].0 {
                    best[i].0 = value;
                    best[i].1.copy_from_slice(&points[row]);
                }
            }
            if step < cfg.ascent_steps {
                let point = &mut points[row];
                if grad.iter().all(|&g| g == 0.0) {
                    // Flat spot: the center itself (the KL minimum), a dead
                    // ReLU region, or a plateau of the normalized prediction.
                    // Head for a random vertex of the ball and pick a new one
                    // once the projection stops us, until the gradient says
                    // something. Straight runs cover far more of the ball
                    // than a diffusing walk does in the same step budget.
                    let (rng, dir) = walkers[row].get_or_insert_with(|| {
                        (crate::rng(start_seed(seeds[i], start_of(row)) ^ WALK_SALT), Vec::new())
                    });
                    let before = point.clone();
                    for _ in 0..2 {
                        if dir.is_empty() {
                            *dir = (0..point.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                        }
                        for (p, d) in point.iter_mut().zip(dir.iter()) {
                            *p += cfg.ascent_step_size * d;
                        }
                        project(centers[i], point, cfg.epsilon);
                        if *point != before {
                            break;
                        }
                        dir.clear();
                    }
                } else {
                    for (p, g) in point.iter_mut().zip(&grad) {
                        *p += cfg.ascent_step_size * sign(*g);
                    }
                }
                project(centers[i], point, cfg.epsilon);
            }
        }
    }
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(i, (value, point))| {
            let delta = point.iter().zip(centers[i]).map(|(p, c)| p - c).collect();
            (value, delta, per_start[i * r..(i + 1) * r].to_vec())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetTag {
    Mnist,
    Cifar10,
    Other,
}

impl FromStr for DatasetTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mnist" => DatasetTag::Mnist,
            "cifar10" | "cifar-10" => DatasetTag::Cifar10,
            _ => DatasetTag::Other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grade {
    Vulnerable,
    FairlyRobust,
    Robust,
    Ungraded,
}

impl Grade {
    pub fn as_str(&self) -> &'static str {
        match self {
            Grade::Vulnerable => "Vulnerable",
            Grade::FairlyRobust => "FairlyRobust",
            Grade::Robust => "Robust",
            Grade::Ungraded => "Ungraded",
        }
    }
}

/// MNIST grading at the 0.3 l-infinity budget: below 100 is vulnerable,
/// `[100, 270)` fairly robust, 270 and above robust. Other datasets have no
/// calibrated bands.
pub fn grade(psi_value: f64, dataset: DatasetTag) -> Grade {
    match dataset {
        DatasetTag::Mnist if psi_value >= 270.0 => Grade::Robust,
        DatasetTag::Mnist if psi_value >= 100.0 => Grade::FairlyRobust,
        DatasetTag::Mnist => Grade::Vulnerable,
        _ => Grade::Ungraded,
    }
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub model_id: String,
    pub normalized: bool,
    pub max_kl: Vec<f64>,
    /// `1 / mean(max_kl)`, capped at [`PSI_CAP`].
    pub psi_model: f64,
    /// `mean(1 / max_kl)` with the same per-sample cap.
    pub psi_mean_of_inverses: f64,
    pub saturated: bool,
    pub grade: Grade,
    pub config: MetricConfig,
    pub deltas: Option<Vec<Tensor>>,
}

/// `1 / mean(values)` with saturation; also used for batch sub-aggregates.
pub fn psi_from_divergences(values: &[f64]) -> (f64, bool) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean < SATURATION_FLOOR {
        (PSI_CAP, true)
    } else {
        (1.0 / mean, false)
    }
}

impl RobustnessReport {
    /// Per-sample CSV followed by a `#`-prefixed summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,max_kl\n");
        for (i, v) in self.max_kl.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out.push_str(&self.summary_block());
        out
    }

    pub fn summary_block(&self) -> String {
        let c = &self.config;
        format!(
            "# model={}\n# prediction={}\n# psi_model={}\n# psi_mean_of_inverses={}\n# saturated={}\n# grade={}\n# epsilon={} ascent_steps={} ascent_step_size={} restarts={} prob_floor={} seed={}\n# samples={}\n",
            self.model_id,
            if self.normalized { "normalized" } else { "softmax" },
            self.psi_model,
            self.psi_mean_of_inverses,
            self.saturated,
            self.grade.as_str(),
            c.epsilon,
            c.ascent_steps,
            c.ascent_step_size,
            c.restarts,
            c.prob_floor,
            c.seed,
            self.max_kl.len()
        )
    }
}

/// Per-sample max-KL values over a batch; sample `i` uses seed `seed ^ i`.
pub fn per_sample_max_kl(
    net: &Network,
    batch: &Dataset,
    cfg: &MetricConfig,
    normalized: bool,
) -> Result<Vec<MaxKl>> {
    cfg.validate()?;
    let mode = cfg.mode(normalized);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let chunks = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let centers: Vec<&[f64]> = chunk.iter().map(|&i| batch.image(i)).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| cfg.seed ^ i as u64).collect();
            max_kl_many(net, &centers, &seeds, cfg, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(i, (value, delta, per_start))| MaxKl {
            value,
            delta: batch.tensor(i).with_data(delta),
            per_start,
        })
        .collect())
}

fn psi_report(
    net: &Network,
    batch: &Dataset,
    cfg: &MetricConfig,
    normalized: bool,
    dataset: DatasetTag,
    keep_deltas: bool,
) -> Result<RobustnessReport> {
    if batch.is_empty() {
        return Err(Error::Config("psi needs a non-empty batch".into()));
    }
    let results = per_sample_max_kl(net, batch, cfg, normalized)?;
    let max_kl: Vec<f64> = results.iter().map(|r| r.value).collect();
    let (psi_model, saturated) = psi_from_divergences(&max_kl);
    let psi_mean_of_inverses = max_kl
        .iter()
        .map(|&v| if v < SATURATION_FLOOR { PSI_CAP } else { 1.0 / v })
        .sum::<f64>()
        / max_kl.len() as f64;
    Ok(RobustnessReport {
        model_id: net.provenance.get("model_id").cloned().unwrap_or_default(),
        normalized,
        max_kl,
        psi_model,
        psi_mean_of_inverses,
        saturated,
        grade: grade(psi_model, dataset),
        config: cfg.clone(),
        deltas: keep_deltas.then(|| results.into_iter().map(|r| r.delta).collect()),
    })
}

/// Model-level score over a batch on normalized predictions.
pub fn psi(net: &Network, batch: &Dataset, cfg: &MetricConfig, dataset: DatasetTag) -> Result<RobustnessReport> {
    psi_report(net, batch, cfg, true, dataset, false)
}

/// As [`psi`], keeping the maximizing perturbation of every sample.
pub fn psi_with_deltas(net: &Network, batch: &Dataset, cfg: &MetricConfig, dataset: DatasetTag) -> Result<RobustnessReport> {
    psi_report(net, batch, cfg, true, dataset, true)
}

/// The same pipeline on raw softmax outputs. Not scale-invariant.
pub fn psi_unnormalized(net: &Network, batch: &Dataset, cfg: &MetricConfig) -> Result<RobustnessReport> {
    let mut r = psi_report(net, batch, cfg, false, DatasetTag::Other, false)?;
    r.grade = Grade::Ungraded;
    Ok(r)
}

/// Input-space epsilon-sharpness at one sample:
/// `100 * (max_{|d| <= eps} L(x + d) - L(x)) / (1 + L(x))` with `L` the
/// cross-entropy at the true label.
///
/// The inner maximum takes the largest loss seen along sign-gradient ascent
/// trajectories of both the cross-entropy and the margin loss, from the
/// configured starts.
pub fn epsilon_sharpness(net: &Network, x: &Tensor, label: usize, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    net.check_tensor(x)?;
    Ok(sharpness_many(net, &[x.data()], &[label], &[cfg.seed], cfg)?[0])
}

fn sharpness_many(net: &Network, centers: &[&[f64]], labels: &[usize], seeds: &[u64], cfg: &MetricConfig) -> Result<Vec<f64>> {
    let ce: Vec<ScalarObjective> = labels.iter().map(|&l| ScalarObjective::cross_entropy(l)).collect();
    let base = net
        .logits_batch(centers)?
        .iter()
        .zip(&ce)
        .map(|(z, o)| Ok(o.evaluate(z)?.value))
        .collect::<Result<Vec<f64>>>()?;
    if cfg.epsilon == 0.0 {
        return Ok(vec![0.0; centers.len()]);
    }
    let r = cfg.restarts;
    // rows: (sample, ascent, start); ascent 0 follows the cross-entropy,
    // ascent 1 the margin loss
    let rows = centers.len() * 2 * r;
    let sample = |row: usize| row / (2 * r);
    let ascent: Vec<ScalarObjective> = (0..rows)
        .map(|row| {
            let label = labels[sample(row)];
            if (row / r) % 2 == 0 {
                ScalarObjective::cross_entropy(label)
            } else {
                ScalarObjective::CwMargin { label }
            }
        })
        .collect();
    let mut points: Vec<Vec<f64>> = (0..rows)
        .map(|row| {
            let (i, start) = (sample(row), row % r);
            if start == 0 {
                centers[i].to_vec()
            } else {
                random_start(centers[i], cfg.epsilon, start_seed(seeds[i], start))
            }
        })
        .collect();
    let mut best = base.clone();
    for step in 0..=cfg.ascent_steps {
        let views: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
        let trace = net.trace_batch(&views)?;
        let mut g = Vec::with_capacity(rows * net.num_classes());
        for row in 0..rows {
            let z = trace.logits(row);
            let i = sample(row);
            best[i] = best[i].max(ce[i].evaluate(z)?.value);
            g.extend(ascent[row].evaluate(z)?.grad);
        }
        if step == cfg.ascent_steps {
            break;
        }
        let grads = net.backward_batch(&trace, &g, true, None);
        let d = net.input_len();
        for (row, point) in points.iter_mut().enumerate() {
            for (p, gi) in point.iter_mut().zip(&grads[row * d..(row + 1) * d]) {
                *p += cfg.ascent_step_size * sign(*gi);
            }
            project(centers[sample(row)], point, cfg.epsilon);
        }
    }
    Ok(best
        .iter()
        .zip(&base)
        .map(|(b, l)| 100.0 * (b - l).max(0.0) / (1.0 + l))
        .collect())
}

/// Mean epsilon-sharpness over a batch.
pub fn batch_sharpness(net: &Network, batch: &Dataset, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let values = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let centers: Vec<&[f64]> = chunk.iter().map(|&i| batch.image(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| batch.label(i)).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| cfg.seed ^ i as u64).collect();
            sharpness_many(net, &centers, &labels, &seeds, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = values.into_iter().flatten().collect();
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// Copy of `net` with the final dense layer's weights and bias scaled by `c`.
pub fn reparameterize(net: &Network, c: f64) -> Result<Network> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Config(format!("scale {c} must be positive and finite")));
    }
    if !matches!(net.layers().last(), Some(LayerSpec::Dense { .. })) {
        return Err(Error::Architecture("final layer is not dense".into()));
    }
    let mut out = net.clone();
    let last = out.params_mut().last_mut().expect("validated non-empty");
    last.scale(c);
    out.provenance.insert("logit_scale".into(), c.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_layers, LayerParams};

    fn constant_net(d: usize) -> Network {
        Network::new(
            vec![d],
            3,
            vec![LayerSpec::Dense { in_dim: d, out_dim: 3 }],
            vec![LayerParams {
                weight: vec![0.0; 3 * d],
                bias: vec![0.5, -0.2, 1.0],
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_and_constant_model_give_zero() {
        let net = Network::init(vec![4], 3, mlp_layers(4, &[6], 3), &mut crate::rng(0)).unwrap();
        let x = Tensor::from_vec(vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let r = max_kl(&net, &x, &MetricConfig::new(0.0, 1)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.delta.data().iter().all(|&v| v == 0.0));

        let c = constant_net(4);
        let r = max_kl(&c, &x, &MetricConfig::new(0.3, 1)).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(epsilon_sharpness(&c, &x, 0, &MetricConfig::new(0.3, 1)).unwrap(), 0.0);
    }

    #[test]
    fn constant_model_saturates_psi() {
        let c = constant_net(2);
        let data = crate::data::two_moons(10, 0.05, &mut crate::rng(3));
        let r = psi(&c, &data, &MetricConfig::new(0.3, 0), DatasetTag::Other).unwrap();
        assert!(r.saturated);
        assert_eq!(r.psi_model, PSI_CAP);
    }

    #[test]
    fn ascent_stays_in_budget_and_beats_starts() {
        let net = Network::init(vec![5], 4, mlp_layers(5, &[10], 4), &mut crate::rng(7)).unwrap();
        let x = Tensor::from_vec(vec![0.5, 0.1, 0.95, 0.4, 0.6]).unwrap();
        let cfg = MetricConfig::new(0.2, 5);
        let r = max_kl(&net, &x, &cfg).unwrap();
        assert!(r.value > 0.0);
        assert!(r.delta.linf_norm() <= 0.2 + 1e-12);
        assert_eq!(r.per_start.len(), 4);
        assert!(r.per_start.iter().all(|&v| v <= r.value));
    }

    #[test]
    fn grading_bands() {
        assert_eq!(grade(99.0, DatasetTag::Mnist), Grade::Vulnerable);
        assert_eq!(grade(100.0, DatasetTag::Mnist), Grade::FairlyRobust);
        assert_eq!(grade(269.99, DatasetTag::Mnist), Grade::FairlyRobust);
        assert_eq!(grade(270.0, DatasetTag::Mnist), Grade::Robust);
        assert_eq!(grade(958.4, DatasetTag::Mnist), Grade::Robust);
        assert_eq!(grade(958.4, DatasetTag::Cifar10), Grade::Ungraded);
    }

    #[test]
    fn reparameterize_scales_logits_only() {
        let net = Network::init(vec![3], 3, mlp_layers(3, &[5], 3), &mut crate::rng(1)).unwrap();
        assert_eq!(reparameterize(&net, 1.0).unwrap().params(), net.params());
        let big = reparameterize(&net, 100.0).unwrap();
        let x = [0.3, 0.2, 0.9];
        let (a, b) = (net.logits(&x).unwrap(), big.logits(&x).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((v - 100.0 * u).abs() <= 1e-12 * v.abs().max(1.0));
        }
        assert!(reparameterize(&net, 0.0).is_err());
        assert!(reparameterize(&net, f64::NAN).is_err());
    }

    #[test]
    fn report_csv_carries_summary() {
        let net = Network::init(vec![2], 2, mlp_layers(2, &[16], 2), &mut crate::rng(1)).unwrap();
        let data = crate::data::two_moons(6, 0.05, &mut crate::rng(3));
        let mut cfg = MetricConfig::new(0.1, 0);
        cfg.ascent_steps = 10;
        let r = psi(&net, &data, &cfg, DatasetTag::Mnist).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 7);
        assert!(csv.contains("# psi_model="));
        let mean = r.max_kl.iter().sum::<f64>() / 6.0;
        assert_eq!(r.psi_model, 1.0 / mean);
    }
}
