//! Experiment orchestration.
//!
//! An [`ExperimentConfig`] is a JSON document naming a dataset, a list of
//! models (saved files or training recipes) and the attack/metric settings.
//! [`run_experiment`] runs the stages in order, writes CSV and aligned-text
//! reports into the output directory and returns a [`RunManifest`] listing
//! every emitted file with its SHA-256 digest.
//!
//! Every report starts with `# config_hash=...` and `# seed=...` lines. No
//! wall-clock data goes into the reports, only into `manifest.json`, so
//! re-running a config reproduces the reports byte for byte.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::attacks::{evaluate_attack, AttackConfig};
use crate::data::{gaussian_blobs, two_moons, Dataset, Split};
use crate::error::{Error, Result};
use crate::metric::{
    batch_sharpness, per_sample_max_kl, psi, psi_unnormalized, reparameterize, DatasetTag, MetricConfig,
    DEFAULT_PROB_FLOOR,
};
use crate::nn::{load_model, model_file::hex, Network};
use crate::surface::{sample_surface, BetaKind, DirectionPair, SurfaceKind};
use crate::train::{train, Architecture, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A row is flagged as an unreliable PGD estimate when PGD-30 accuracy
/// exceeds CW-30 accuracy by at least this much.
pub const UNRELIABLE_PGD_GAP: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    TableMetricVsAcc,
    UnreliablePgd,
    ReparamTable,
    BatchStability,
    SurfaceGallery,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::TableMetricVsAcc => "table_metric_vs_acc",
            ExperimentKind::UnreliablePgd => "unreliable_pgd",
            ExperimentKind::ReparamTable => "reparam_table",
            ExperimentKind::BatchStability => "batch_stability",
            ExperimentKind::SurfaceGallery => "surface_gallery",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

impl From<SplitName> for Split {
    fn from(s: SplitName) -> Split {
        match s {
            SplitName::Train => Split::Train,
            SplitName::Test => Split::Test,
        }
    }
}

fn test_split() -> SplitName {
    SplitName::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory holding `train-*` / `t10k-*` IDX files (optionally gzipped).
    MnistDir {
        path: PathBuf,
        #[serde(default = "test_split")]
        split: SplitName,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// `label,pixel...` rows; samples are flat vectors.
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
        #[serde(default)]
        limit: Option<usize>,
    },
    Blobs {
        n: usize,
        classes: usize,
        std: f64,
        seed: u64,
    },
    Moons {
        n: usize,
        noise_std: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let limit = |d: Dataset, l: &Option<usize>| match l {
            Some(n) => d.take(*n),
            None => d,
        };
        match self {
            DatasetSpec::MnistDir { path, split, limit: l } => {
                Ok(limit(Dataset::load_mnist_dir(path, (*split).into())?, l))
            }
            DatasetSpec::Csv { path, num_classes, limit: l } => {
                Ok(limit(Dataset::load_csv(path, *num_classes, Split::Test)?, l))
            }
            DatasetSpec::Blobs { n, classes, std, seed } => Ok(gaussian_blobs(*n, *classes, *std, &mut crate::rng(*seed))),
            DatasetSpec::Moons { n, noise_std, seed } => Ok(two_moons(*n, *noise_std, &mut crate::rng(*seed))),
        }
    }

    fn tag(&self) -> DatasetTag {
        match self {
            DatasetSpec::MnistDir { .. } => DatasetTag::Mnist,
            _ => DatasetTag::Other,
        }
    }

    fn check_paths(&self) -> Result<()> {
        match self {
            DatasetSpec::MnistDir { path, .. } | DatasetSpec::Csv { path, .. } if !path.exists() => {
                Err(Error::Config(format!("dataset path {} does not exist", path.display())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    Mlp { hidden: Vec<usize> },
    LenetSmall,
    Layers(Architecture),
}

impl ArchSpec {
    pub fn resolve(&self, data: &Dataset) -> Result<Architecture> {
        Ok(match self {
            ArchSpec::Mlp { hidden } => Architecture::mlp(data.sample_len(), hidden, data.num_classes()),
            ArchSpec::LenetSmall => {
                if data.sample_len() != 784 {
                    return Err(Error::Config(format!(
                        "lenet_small needs 28x28 inputs, dataset has {} values per sample",
                        data.sample_len()
                    )));
                }
                Architecture::lenet_small(data.num_classes())
            }
            ArchSpec::Layers(a) => a.clone(),
        })
    }
}

/// A model to evaluate: either `path` to a saved model, or a `train` recipe
/// with an `architecture`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self { epsilon: 0.3, steps: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub epsilon: f64,
    pub ascent_steps: usize,
    /// Defaults to `epsilon / 10`.
    pub ascent_step_size: Option<f64>,
    pub restarts: usize,
    pub prob_floor: f64,
    /// Samples (from the front of the dataset) entering psi.
    pub batch: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            ascent_steps: 100,
            ascent_step_size: None,
            restarts: 4,
            prob_floor: DEFAULT_PROB_FLOOR,
            batch: 1000,
        }
    }
}

impl MetricSettings {
    pub fn config(&self, seed: u64) -> MetricConfig {
        let mut c = MetricConfig::new(self.epsilon, seed);
        c.ascent_steps = self.ascent_steps;
        c.ascent_step_size = self.ascent_step_size.unwrap_or(self.epsilon / 10.0);
        c.restarts = self.restarts;
        c.prob_floor = self.prob_floor;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReparamSettings {
    /// Logit-layer scales compared against the unscaled model.
    pub scales: Vec<f64>,
    /// Samples entering psi and sharpness.
    pub samples: usize,
}

impl Default for ReparamSettings {
    fn default() -> Self {
        Self {
            scales: vec![0.01, 100.0],
            samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySettings {
    pub batch_sizes: Vec<usize>,
    /// Random partitions averaged per batch size.
    pub permutations: usize,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        Self {
            batch_sizes: vec![100, 250, 500, 1000],
            permutations: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceSettings {
    /// Dataset indices to center grids on; when empty the first `count`
    /// samples are used.
    pub indices: Vec<usize>,
    pub count: usize,
    pub half_extent: usize,
    pub step: f64,
    pub kind: SurfaceKindName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKindName {
    Decision,
    CrossEntropyLoss,
}

impl Default for SurfaceSettings {
    fn default() -> Self {
        Self {
            indices: Vec::new(),
            count: 4,
            half_extent: 20,
            step: 0.015,
            kind: SurfaceKindName::Decision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Evaluation data.
    pub dataset: DatasetSpec,
    /// Training data for models given as recipes. For an MNIST directory it
    /// defaults to the train split of the same directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dataset: Option<DatasetSpec>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub attack: AttackSettings,
    #[serde(default)]
    pub metric: MetricSettings,
    #[serde(default)]
    pub reparam: ReparamSettings,
    #[serde(default)]
    pub stability: StabilitySettings,
    #[serde(default)]
    pub surface: SurfaceSettings,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks the fields serde cannot. Paths are checked in
    /// [`run_experiment`], since they must exist at run time.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.models.is_empty() {
            return bad("`models` must list at least one model".into());
        }
        for (k, m) in self.models.iter().enumerate() {
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!(
                    "models[{k}].name {:?} must be non-empty and use only letters, digits, '_' or '-'",
                    m.name
                ));
            }
            match (&m.path, &m.train, &m.architecture) {
                (Some(_), None, None) => {}
                (None, Some(t), Some(_)) => t.validate().map_err(|e| {
                    Error::Config(format!("models[{k}] ({}).train: {e}", m.name))
                })?,
                (None, Some(_), None) => {
                    return bad(format!("models[{k}] ({}) has `train` but no `architecture`", m.name))
                }
                _ => {
                    return bad(format!(
                        "models[{k}] ({}) needs exactly one of `path` or `train` + `architecture`",
                        m.name
                    ))
                }
            }
        }
        if self.kind == ExperimentKind::UnreliablePgd || self.kind == ExperimentKind::TableMetricVsAcc {
            let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            // listing a model twice is allowed; it must then be the same model
            for n in names {
                let specs: Vec<&ModelSpec> = self.models.iter().filter(|m| m.name == n).collect();
                if specs.windows(2).any(|w| w[0] != w[1]) {
                    return bad(format!("model name {n:?} is used for two different models"));
                }
            }
        }
        if !(self.attack.epsilon >= 0.0 && self.attack.epsilon <= 1.0) || self.attack.steps == 0 {
            return bad("attack needs epsilon in [0, 1] and steps >= 1".into());
        }
        self.metric.config(self.seed).validate()?;
        if self.metric.batch == 0 {
            return bad("metric.batch must be positive".into());
        }
        if self.kind == ExperimentKind::ReparamTable
            && (self.reparam.scales.is_empty() || self.reparam.scales.iter().any(|c| !(c.is_finite() && *c > 0.0)))
        {
            return bad("reparam.scales must be a non-empty list of positive numbers".into());
        }
        if self.kind == ExperimentKind::BatchStability
            && (self.stability.batch_sizes.is_empty()
                || self.stability.batch_sizes.contains(&0)
                || self.stability.permutations == 0)
        {
            return bad("stability needs positive batch_sizes and permutations".into());
        }
        if self.kind == ExperimentKind::SurfaceGallery && !(self.surface.step > 0.0 && self.surface.step.is_finite()) {
            return bad("surface.step must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, with `output_dir`
    /// blanked: where results land is not part of what they are, and the
    /// hash is stamped into every table.
    pub fn hash(&self) -> String {
        let identity = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmittedFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<EmittedFile>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Writes report files and records their digests.
struct Emitter {
    dir: PathBuf,
    header: String,
    files: Vec<EmittedFile>,
}

impl Emitter {
    fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(EmittedFile {
            path: name.to_string(),
            sha256: hex(&Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Writes `body` behind the `# config_hash` / `# seed` header.
    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("{}{body}", self.header);
        self.write_raw(name, text.as_bytes())
    }
}

/// Fraction of samples classified correctly.
pub fn evaluate_clean_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    crate::train::clean_accuracy(net, data)
}

/// Shapes `data` to the model's input shape (e.g. flat MNIST for an MLP).
fn fit_to(data: &Dataset, net: &Network) -> Result<Dataset> {
    if data.sample_shape() == net.input_shape() {
        Ok(data.clone())
    } else {
        data.clone().reshaped(net.input_shape().to_vec())
    }
}

struct Loaded {
    name: String,
    net: Network,
}

fn defense(net: &Network) -> String {
    net.provenance.get("regime").cloned().unwrap_or_else(|| "unknown".into())
}

fn load_models(cfg: &ExperimentConfig, eval: &Dataset, out: &mut Emitter) -> Result<Vec<Loaded>> {
    let mut train_data: Option<Dataset> = None;
    let mut models: Vec<Loaded> = Vec::with_capacity(cfg.models.len());
    for spec in &cfg.models {
        if let Some(prev) = models.iter().find(|m| m.name == spec.name) {
            models.push(Loaded {
                name: spec.name.clone(),
                net: prev.net.clone(),
            });
            continue;
        }
        let stage = format!("load model {}", spec.name);
        let mut net = match (&spec.path, &spec.train, &spec.architecture) {
            (Some(path), _, _) => {
                if !path.exists() {
                    return Err(Error::Config(format!("model file {} does not exist", path.display())).in_stage(stage));
                }
                load_model(path).map_err(|e| e.in_stage(stage))?
            }
            (None, Some(tc), Some(arch)) => {
                let stage = format!("train model {}", spec.name);
                if train_data.is_none() {
                    let ts = match (&cfg.train_dataset, &cfg.dataset) {
                        (Some(t), _) => t.clone(),
                        (None, DatasetSpec::MnistDir { path, .. }) => DatasetSpec::MnistDir {
                            path: path.clone(),
                            split: SplitName::Train,
                            limit: None,
                        },
                        _ => {
                            return Err(Error::Config(
                                "models with a train recipe need `train_dataset` unless the dataset is an MNIST directory".into(),
                            )
                            .in_stage(stage))
                        }
                    };
                    ts.check_paths().map_err(|e| e.in_stage(stage.clone()))?;
                    train_data = Some(ts.load().map_err(|e| e.in_stage(stage.clone()))?);
                }
                let data = train_data.as_ref().expect("loaded above");
                let arch = arch.resolve(data).map_err(|e| e.in_stage(stage.clone()))?;
                let data = data.clone().reshaped(arch.input_shape.clone()).map_err(|e| e.in_stage(stage.clone()))?;
                let net = train(tc, &data, &arch).map_err(|e| e.in_stage(stage.clone()))?;
                let file = format!("models/{}.json", spec.name);
                let text = crate::nn::model_file::to_json(&net).map_err(|e| e.in_stage(stage.clone()))?;
                out.write_raw(&file, text.as_bytes()).map_err(|e| e.in_stage(stage))?;
                net
            }
            _ => unreachable!("validated"),
        };
        if net.input_len() != eval.sample_len() {
            return Err(Error::Shape {
                expected: net.input_shape().to_vec(),
                actual: eval.sample_shape().to_vec(),
            }
            .in_stage(format!("load model {}", spec.name)));
        }
        net.provenance.insert("model_id".into(), spec.name.clone());
        models.push(Loaded {
            name: spec.name.clone(),
            net,
        });
    }
    Ok(models)
}

/// Runs every stage of `cfg` and writes the reports and `manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started = now_ms();
    cfg.validate().map_err(|e| e.in_stage("validate config"))?;
    cfg.dataset.check_paths().map_err(|e| e.in_stage("load dataset"))?;
    for m in &cfg.models {
        if let Some(p) = &m.path {
            if !p.exists() {
                return Err(Error::Config(format!("model file {} does not exist", p.display()))
                    .in_stage(format!("load model {}", m.name)));
            }
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(&cfg.output_dir, e).in_stage("create output directory"))?;
    let config_hash = cfg.hash();
    let mut out = Emitter {
        dir: cfg.output_dir.clone(),
        header: format!("# config_hash={config_hash}\n# seed={}\n", cfg.seed),
        files: Vec::new(),
    };
    let data = cfg.dataset.load().map_err(|e| e.in_stage("load dataset"))?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()).in_stage("load dataset"));
    }
    let models = load_models(cfg, &data, &mut out)?;

    match cfg.kind {
        ExperimentKind::TableMetricVsAcc => table_metric_vs_acc(cfg, &data, &models, &mut out, false)?,
        ExperimentKind::UnreliablePgd => table_metric_vs_acc(cfg, &data, &models, &mut out, true)?,
        ExperimentKind::ReparamTable => reparam_table(cfg, &data, &models, &mut out)?,
        ExperimentKind::BatchStability => batch_stability(cfg, &data, &models, &mut out)?,
        ExperimentKind::SurfaceGallery => surface_gallery(cfg, &data, &models, &mut out)?,
    }

    let manifest = RunManifest {
        kind: cfg.kind.as_str().to_string(),
        config_hash,
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        files: out.files,
    };
    let path = cfg.output_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e).in_stage("write manifest"))?;
    Ok(manifest)
}

/// Formats rows as a left-aligned text table under `header`.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (k, c) in cells.enumerate() {
            if k > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{c:<w$}", w = widths[k]);
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&mut header.iter().copied());
    out += &line(&mut widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str));
    for r in rows {
        out += &line(&mut r.iter().map(String::as_str));
    }
    out
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",") + "\n";
    for r in rows {
        out += &(r.join(",") + "\n");
    }
    out
}

/// One row of the metric-versus-accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub model: String,
    pub defense: String,
    pub clean_acc: f64,
    pub psi: f64,
    pub grade: String,
    pub fgsm_acc: Option<f64>,
    pub pgd_acc: f64,
    pub cw_acc: f64,
}

impl ModelRow {
    /// High PGD accuracy that the margin attack does not confirm.
    pub fn unreliable(&self) -> bool {
        self.pgd_acc - self.cw_acc >= UNRELIABLE_PGD_GAP
    }
}

/// Clean accuracy, psi and attack accuracies for one model.
pub fn evaluate_model(
    name: &str,
    net: &Network,
    data: &Dataset,
    attack: &AttackSettings,
    metric: &MetricSettings,
    tag: DatasetTag,
    seed: u64,
    with_fgsm: bool,
) -> Result<ModelRow> {
    let data = fit_to(data, net).map_err(|e| e.in_stage(format!("prepare data for {name}")))?;
    let clean_acc = evaluate_clean_accuracy(net, &data).map_err(|e| e.in_stage(format!("clean accuracy {name}")))?;
    let batch = data.take(metric.batch);
    let report = psi(net, &batch, &metric.config(seed), tag).map_err(|e| e.in_stage(format!("metric {name}")))?;
    let eps = attack.epsilon;
    let fgsm_acc = if with_fgsm {
        Some(
            evaluate_attack(net, &data, &AttackConfig::fgsm(eps))
                .map_err(|e| e.in_stage(format!("fgsm attack {name}")))?
                .accuracy,
        )
    } else {
        None
    };
    let pgd_acc = evaluate_attack(net, &data, &AttackConfig::pgd(eps, attack.steps, seed))
        .map_err(|e| e.in_stage(format!("pgd attack {name}")))?
        .accuracy;
    let cw_acc = evaluate_attack(net, &data, &AttackConfig::cw(eps, attack.steps, seed))
        .map_err(|e| e.in_stage(format!("cw attack {name}")))?
        .accuracy;
    Ok(ModelRow {
        model: name.to_string(),
        defense: defense(net),
        clean_acc,
        psi: report.psi_model,
        grade: report.grade.as_str().to_string(),
        fgsm_acc,
        pgd_acc,
        cw_acc,
    })
}

fn table_metric_vs_acc(
    cfg: &ExperimentConfig,
    data: &Dataset,
    models: &[Loaded],
    out: &mut Emitter,
    unreliable: bool,
) -> Result<()> {
    let mut rows: Vec<ModelRow> = Vec::new();
    for m in models {
        let cached = rows.iter().position(|r| r.model == m.name);
        let row = match cached {
            Some(k) => rows[k].clone(),
            None => evaluate_model(&m.name, &m.net, data, &cfg.attack, &cfg.metric, cfg.dataset.tag(), cfg.seed, unreliable)?,
        };
        rows.push(row);
    }
    let steps = cfg.attack.steps;
    let pgd = format!("pgd{steps}_acc");
    let cw = format!("cw{steps}_acc");
    let mut header = vec!["model", "defense", "clean_acc", "psi", "grade"];
    if unreliable {
        header.push("fgsm_acc");
    }
    header.push(&pgd);
    header.push(&cw);
    if unreliable {
        header.push("unreliable_pgd");
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![
                r.model.clone(),
                r.defense.clone(),
                format!("{:.4}", r.clean_acc),
                format!("{:.6}", r.psi),
                r.grade.clone(),
            ];
            if let Some(f) = r.fgsm_acc {
                c.push(format!("{f:.4}"));
            }
            c.push(format!("{:.4}", r.pgd_acc));
            c.push(format!("{:.4}", r.cw_acc));
            if unreliable {
                c.push(r.unreliable().to_string());
            }
            c
        })
        .collect();
    let mut note = format!("# epsilon={} attack_steps={steps}\n", cfg.attack.epsilon);
    if unreliable {
        let _ = writeln!(note, "# unreliable_pgd_threshold={UNRELIABLE_PGD_GAP} (pgd_acc - cw_acc)");
    }
    let name = cfg.kind.as_str();
    out.write(&format!("{name}.csv"), &(note.clone() + &csv_table(&header, &cells)))?;
    out.write(&format!("{name}.txt"), &(note + &aligned_table(&header, &cells)))?;
    Ok(())
}

/// Metrics of one model under logit-layer scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamRow {
    pub scale: f64,
    pub psi_normalized: f64,
    pub psi_softmax: f64,
    pub sharpness: f64,
    /// Fraction of the dataset whose prediction matches the unscaled model.
    pub prediction_agreement: f64,
}

pub fn reparam_rows(net: &Network, data: &Dataset, metric: &MetricConfig, scales: &[f64], samples: usize) -> Result<Vec<ReparamRow>> {
    let data = fit_to(data, net)?;
    let batch = data.take(samples);
    let base: Vec<usize> = (0..data.len()).map(|i| net.predict(data.image(i))).collect::<Result<_>>()?;
    let mut all = vec![1.0];
    all.extend(scales.iter().copied().filter(|&c| c != 1.0));
    all.iter()
        .map(|&c| {
            let scaled = reparameterize(net, c)?;
            let same = (0..data.len())
                .map(|i| Ok((scaled.predict(data.image(i))? == base[i]) as usize))
                .sum::<Result<usize>>()?;
            Ok(ReparamRow {
                scale: c,
                psi_normalized: psi(&scaled, &batch, metric, DatasetTag::Other)?.psi_model,
                psi_softmax: psi_unnormalized(&scaled, &batch, metric)?.psi_model,
                sharpness: batch_sharpness(&scaled, &batch, metric)?,
                prediction_agreement: same as f64 / data.len() as f64,
            })
        })
        .collect()
}

fn reparam_table(cfg: &ExperimentConfig, data: &Dataset, models: &[Loaded], out: &mut Emitter) -> Result<()> {
    let metric = cfg.metric.config(cfg.seed);
    let header = ["model", "metric", "scale", "value"];
    let mut long = Vec::new();
    let mut text = String::new();
    for m in models {
        let rows = reparam_rows(&m.net, data, &metric, &cfg.reparam.scales, cfg.reparam.samples)
            .map_err(|e| e.in_stage(format!("reparameterize {}", m.name)))?;
        let metrics: [(&str, fn(&ReparamRow) -> f64); 4] = [
            ("psi_normalized", |r| r.psi_normalized),
            ("psi_softmax", |r| r.psi_softmax),
            ("eps_sharpness", |r| r.sharpness),
            ("prediction_agreement", |r| r.prediction_agreement),
        ];
        let mut grid = Vec::new();
        for (label, get) in metrics {
            let mut cells = vec![label.to_string()];
            for r in &rows {
                long.push(vec![m.name.clone(), label.to_string(), r.scale.to_string(), format!("{:.6}", get(r))]);
                cells.push(format!("{:.6}", get(r)));
            }
            grid.push(cells);
        }
        let scale_names: Vec<String> = rows.iter().map(|r| format!("x{}", r.scale)).collect();
        let mut head = vec!["metric"];
        head.extend(scale_names.iter().map(String::as_str));
        let _ = writeln!(text, "model {}", m.name);
        text += &aligned_table(&head, &grid);
        text.push('\n');
    }
    let note = format!("# samples={} epsilon={}\n", cfg.reparam.samples, cfg.metric.epsilon);
    out.write("reparam_table.csv", &(note.clone() + &csv_table(&header, &long)))?;
    out.write("reparam_table.txt", &(note + &text))?;
    Ok(())
}

/// Spread of batch-level psi at one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityPoint {
    pub batch_size: usize,
    pub batches: usize,
    pub mean_psi: f64,
    /// Sample standard deviation of batch psi over its mean, averaged over
    /// the random partitions.
    pub relative_std: f64,
}

/// For each batch size, repeatedly shuffles the per-sample max-KL values,
/// cuts them into disjoint batches, and measures how much batch psi varies.
/// Sizes that do not yield at least two batches are skipped.
pub fn stability_curve(max_kl: &[f64], sizes: &[usize], permutations: usize, seed: u64) -> Vec<StabilityPoint> {
    let mut rng = crate::rng(seed);
    let mut order: Vec<usize> = (0..max_kl.len()).collect();
    sizes
        .iter()
        .filter(|&&b| b > 0 && max_kl.len() / b >= 2)
        .map(|&b| {
            let batches = max_kl.len() / b;
            let (mut rel_sum, mut psi_sum) = (0.0, 0.0);
            for _ in 0..permutations {
                order.shuffle(&mut rng);
                let psis: Vec<f64> = order
                    .chunks_exact(b)
                    .take(batches)
                    .map(|chunk| crate::metric::psi_from_divergences(&chunk.iter().map(|&i| max_kl[i]).collect::<Vec<_>>()).0)
                    .collect();
                let mean = psis.iter().sum::<f64>() / batches as f64;
                let var = psis.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
                rel_sum += var.sqrt() / mean;
                psi_sum += mean;
            }
            StabilityPoint {
                batch_size: b,
                batches,
                mean_psi: psi_sum / permutations as f64,
                relative_std: rel_sum / permutations as f64,
            }
        })
        .collect()
}

fn batch_stability(cfg: &ExperimentConfig, data: &Dataset, models: &[Loaded], out: &mut Emitter) -> Result<()> {
    let metric = cfg.metric.config(cfg.seed);
    let header = ["model", "batch_size", "batches", "mean_psi", "relative_std"];
    let mut rows = Vec::new();
    for m in models {
        let stage = format!("batch stability {}", m.name);
        let d = fit_to(data, &m.net).map_err(|e| e.in_stage(stage.clone()))?;
        let kl: Vec<f64> = per_sample_max_kl(&m.net, &d, &metric, true)
            .map_err(|e| e.in_stage(stage))?
            .into_iter()
            .map(|r| r.value)
            .collect();
        for p in stability_curve(&kl, &cfg.stability.batch_sizes, cfg.stability.permutations, cfg.seed) {
            rows.push(vec![
                m.name.clone(),
                p.batch_size.to_string(),
                p.batches.to_string(),
                format!("{:.6}", p.mean_psi),
                format!("{:.6}", p.relative_std),
            ]);
        }
    }
    let note = format!("# samples={} permutations={}\n", data.len(), cfg.stability.permutations);
    out.write("batch_stability.csv", &(note.clone() + &csv_table(&header, &rows)))?;
    out.write("batch_stability.txt", &(note + &aligned_table(&header, &rows)))?;
    Ok(())
}

fn surface_gallery(cfg: &ExperimentConfig, data: &Dataset, models: &[Loaded], out: &mut Emitter) -> Result<()> {
    let s = &cfg.surface;
    let indices: Vec<usize> = if s.indices.is_empty() {
        (0..s.count.min(data.len())).collect()
    } else {
        s.indices.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Config(format!("surface index {bad} outside dataset of {}", data.len())).in_stage("surface gallery"));
    }
    let kind = match s.kind {
        SurfaceKindName::Decision => SurfaceKind::Decision,
        SurfaceKindName::CrossEntropyLoss => SurfaceKind::CrossEntropyLoss,
    };
    // grid cells whose coordinates lie within the attack budget
    let radius = ((cfg.attack.epsilon / s.step) + 1e-9).floor() as usize;
    let header = ["model", "sample", "label", "beta_kind", "center_value", "min_within_budget", "negative_within_budget"];
    let mut rows = Vec::new();
    for m in models {
        let d = fit_to(data, &m.net).map_err(|e| e.in_stage("surface gallery"))?;
        for &i in &indices {
            for beta in BetaKind::ALL {
                let stage = format!("surface {} sample {i} {}", m.name, beta.as_str());
                let x = d.tensor(i);
                let dirs = DirectionPair::build(&m.net, &x, d.label(i), beta, s.step, cfg.seed ^ i as u64)
                    .map_err(|e| e.in_stage(stage.clone()))?;
                let grid = sample_surface(&m.net, &x, i, d.label(i), &dirs, s.half_extent, kind)
                    .map_err(|e| e.in_stage(stage))?;
                let min = grid.cells_within(radius).map(|c| c.2).fold(f64::INFINITY, f64::min);
                rows.push(vec![
                    m.name.clone(),
                    i.to_string(),
                    d.label(i).to_string(),
                    beta.as_str().to_string(),
                    format!("{:.6}", grid.center_value()),
                    format!("{min:.6}"),
                    (min < 0.0).to_string(),
                ]);
                out.write(&format!("surfaces/{}_{i}_{}.csv", m.name, beta.as_str()), &grid.to_csv())?;
            }
        }
    }
    let note = format!(
        "# kind={} step={} half_extent={} budget_radius_cells={radius}\n",
        kind.as_str(),
        s.step,
        s.half_extent
    );
    out.write("surface_gallery.csv", &(note.clone() + &csv_table(&header, &rows)))?;
    out.write("surface_gallery.txt", &(note + &aligned_table(&header, &rows)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs_config(dir: &Path, kind: ExperimentKind) -> ExperimentConfig {
        let text = format!(
            r#"{{
                "kind": "{}",
                "dataset": {{"source": "blobs", "n": 60, "classes": 3, "std": 0.05, "seed": 2}},
                "train_dataset": {{"source": "blobs", "n": 120, "classes": 3, "std": 0.05, "seed": 1}},
                "models": [
                    {{"name": "lin", "train": {{"regime": "natural", "epochs": 5, "batch_size": 16, "learning_rate": 0.5, "seed": 3}},
                      "architecture": {{"type": "mlp", "hidden": [8]}}}}
                ],
                "attack": {{"epsilon": 0.1, "steps": 5}},
                "metric": {{"epsilon": 0.1, "ascent_steps": 5, "restarts": 2, "batch": 20}},
                "stability": {{"batch_sizes": [5, 10], "permutations": 3}},
                "reparam": {{"scales": [0.1, 10.0], "samples": 10}},
                "surface": {{"count": 1, "half_extent": 2, "step": 0.05}},
                "output_dir": "{}",
                "seed": 5
            }}"#,
            kind.as_str(),
            dir.display()
        );
        ExperimentConfig::from_json(&text).unwrap()
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_name() {
        let err = ExperimentConfig::from_json(r#"{"kind": "batch_stability", "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn model_needs_exactly_one_source() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blobs_config(dir.path(), ExperimentKind::TableMetricVsAcc);
        cfg.models[0].path = Some("x.json".into());
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("exactly one"), "{msg}");
    }

    #[test]
    fn missing_model_file_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blobs_config(dir.path(), ExperimentKind::TableMetricVsAcc);
        cfg.models[0] = ModelSpec {
            name: "ghost".into(),
            path: Some(dir.path().join("ghost.json")),
            train: None,
            architecture: None,
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "load model ghost"), "{err}");
    }

    #[test]
    fn every_report_carries_hash_and_seed() {
        for kind in [
            ExperimentKind::TableMetricVsAcc,
            ExperimentKind::UnreliablePgd,
            ExperimentKind::ReparamTable,
            ExperimentKind::BatchStability,
            ExperimentKind::SurfaceGallery,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = blobs_config(dir.path(), kind);
            let manifest = run_experiment(&cfg).unwrap();
            assert!(!manifest.files.is_empty());
            for f in manifest.files.iter().filter(|f| !f.path.starts_with("models/")) {
                let text = std::fs::read_to_string(dir.path().join(&f.path)).unwrap();
                assert!(text.starts_with(&format!("# config_hash={}\n# seed=5\n", manifest.config_hash)), "{}", f.path);
            }
        }
    }

    #[test]
    fn outputs_do_not_depend_on_the_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let cfg = blobs_config(&dir.path().join(sub), ExperimentKind::BatchStability);
            let m = run_experiment(&cfg).unwrap();
            (m.config_hash, m.files)
        };
        assert_eq!(run("a"), run("b"));
    }

    #[test]
    fn repeated_model_gives_identical_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blobs_config(dir.path(), ExperimentKind::TableMetricVsAcc);
        cfg.models.push(cfg.models[0].clone());
        run_experiment(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("table_metric_vs_acc.csv")).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("lin,")).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn stability_of_constant_values_is_zero() {
        let kl = vec![0.5; 100];
        let pts = stability_curve(&kl, &[10, 25, 60], 4, 1);
        assert_eq!(pts.len(), 2, "60 gives only one batch");
        assert!(pts.iter().all(|p| p.relative_std == 0.0 && (p.mean_psi - 2.0).abs() < 1e-12));
    }

    #[test]
    fn aligned_table_pads_columns() {
        let t = aligned_table(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    long\n---  ----\nxyz  1\n");
    }
}
