use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use advrobust::attacks::{evaluate_attack, AttackConfig};
use advrobust::data::{gaussian_blobs, two_moons, Dataset, Split};
use advrobust::harness::{run_experiment, ExperimentConfig};
use advrobust::metric::{psi, psi_unnormalized, DatasetTag, MetricConfig};
use advrobust::nn::{load_model, save_model, LayerSpec, Network};
use advrobust::surface::{export_grid, sample_surface, BetaKind, DirectionPair, SurfaceKind};
use advrobust::train::{clean_accuracy, train, Architecture, Optimizer, Regime, TrainConfig};

/// Optional override for the worker thread count.
const THREADS_ENV: &str = "ADVROBUST_THREADS";

#[derive(Parser)]
#[command(name = "advrobust", version, about = "Intrinsic adversarial robustness toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic 2-D dataset as CSV.
    GenData(GenDataArgs),
    /// Train a model and save it as JSON.
    Train(TrainArgs),
    /// Run an attack over a dataset and write per-sample results.
    Attack(AttackArgs),
    /// Sample a decision or loss surface around one input.
    Surface(SurfaceArgs),
    /// Compute the psi robustness score of a model.
    Metric(MetricArgs),
    /// Run an experiment described by a JSON config.
    Experiment {
        config: PathBuf,
    },
    /// Describe a saved model.
    ModelInfo {
        model: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Blobs,
    Moons,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Synthetic,
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Number of blobs.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Blob standard deviation or moon noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Dataset selection shared by the evaluation verbs.
#[derive(Args)]
struct DataArgs {
    /// MNIST IDX directory or CSV file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let split = match self.split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        let data = if self.data.is_dir() {
            Dataset::load_mnist_dir(&self.data, split)?
        } else {
            Dataset::load_csv(&self.data, None, split)?
        };
        Ok(match self.limit {
            Some(n) => data.take(n),
            None => data,
        })
    }

    fn is_mnist(&self) -> bool {
        self.data.is_dir()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Natural,
    AdvFgsm,
    Minmax,
    Distill,
    Gradreg,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = RegimeArg::Natural)]
    regime: RegimeArg,
    /// `mlp:256x128`, `mlp:` (no hidden layer) or `lenet`.
    #[arg(long, default_value = "mlp:256")]
    arch: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Budget for adv-fgsm and minmax.
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// PGD steps for minmax.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// PGD step size for minmax (default epsilon / 4).
    #[arg(long)]
    step_size: Option<f64>,
    /// Epochs over which the budget ramps up linearly.
    #[arg(long, default_value_t = 0)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 100.0)]
    temperature: f64,
    #[arg(long)]
    student_epochs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = AttackKind::Pgd)]
    attack: AttackKind,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    /// Defaults to epsilon / 4.
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-sample CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Dataset index of the center sample.
    #[arg(long, default_value_t = 0)]
    center: usize,
    /// random, fgsm, least_likely or cw.
    #[arg(long, default_value = "cw")]
    beta: String,
    /// decision or loss.
    #[arg(long, default_value = "decision")]
    kind: String,
    #[arg(long, default_value_t = 0.015)]
    step: f64,
    #[arg(long, default_value_t = 20)]
    half_extent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Samples entering the score.
    #[arg(long, default_value_t = 1000)]
    batch: usize,
    /// Total ascent starts, including the unperturbed one.
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use raw softmax outputs instead of normalized predictions.
    #[arg(long)]
    softmax: bool,
    /// Dataset name used for grading (mnist grades; others are ungraded).
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a).context("stage `gen-data`"),
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Surface(a) => surface_cmd(a),
        Command::Metric(a) => metric_cmd(a),
        Command::Experiment { config } => experiment_cmd(&config),
        Command::ModelInfo { model } => model_info(&model),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut rng = advrobust::rng(a.seed);
    let data = match a.kind {
        Synthetic::Blobs => gaussian_blobs(a.n, a.classes, a.noise, &mut rng),
        Synthetic::Moons => two_moons(a.n, a.noise, &mut rng),
    };
    write_file(&a.out, &data.to_csv())?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn parse_arch(spec: &str, data: &Dataset) -> Result<Architecture> {
    if spec == "lenet" {
        if data.sample_len() != 784 {
            bail!("lenet needs 28x28 inputs, data has {} values per sample", data.sample_len());
        }
        return Ok(Architecture::lenet_small(data.num_classes()));
    }
    let Some(widths) = spec.strip_prefix("mlp:") else {
        bail!("unknown architecture {spec:?}; use mlp:<w1>x<w2>... or lenet");
    };
    let hidden = if widths.is_empty() {
        Vec::new()
    } else {
        widths
            .split('x')
            .map(|w| w.parse::<usize>().with_context(|| format!("bad layer width {w:?} in {spec:?}")))
            .collect::<Result<_>>()?
    };
    Ok(Architecture::mlp(data.sample_len(), &hidden, data.num_classes()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = a.data.load().context("stage `load data`")?;
    let arch = parse_arch(&a.arch, &data).context("stage `architecture`")?;
    let data = data.reshaped(arch.input_shape.clone()).context("stage `load data`")?;
    let regime = match a.regime {
        RegimeArg::Natural => Regime::Natural,
        RegimeArg::AdvFgsm => Regime::AdvFgsm {
            epsilon: a.epsilon,
            warmup_epochs: a.warmup_epochs,
        },
        RegimeArg::Minmax => Regime::Minmax {
            epsilon: a.epsilon,
            steps: a.steps,
            step_size: a.step_size.unwrap_or(a.epsilon / 4.0),
            warmup_epochs: a.warmup_epochs,
        },
        RegimeArg::Distill => Regime::Distill {
            temperature: a.temperature,
            student_epochs: a.student_epochs,
        },
        RegimeArg::Gradreg => Regime::Gradreg {
            lambda: a.lambda,
            fd_step: 1e-2,
        },
    };
    let optimizer = match a.optimizer {
        OptimizerArg::Sgd => Optimizer::Sgd,
        OptimizerArg::Adam => Optimizer::Adam,
    };
    let cfg = TrainConfig::natural(a.epochs, a.batch_size, a.lr, a.seed)
        .with_regime(regime)
        .with_optimizer(optimizer);
    let net = train(&cfg, &data, &arch).context("stage `train`")?;
    let acc = clean_accuracy(&net, &data).context("stage `evaluate`")?;
    save_model(&net, &a.out).context("stage `save model`")?;
    println!("trained {} ({} parameters), train accuracy {acc:.4}", arch.describe(), net.num_params());
    println!("saved {}", a.out.display());
    Ok(())
}

/// Loads a model and the data shaped to its input.
fn model_and_data(model: &Path, data: &DataArgs) -> Result<(Network, Dataset)> {
    let net = load_model(model).context("stage `load model`")?;
    let d = data.load().context("stage `load data`")?;
    let d = d.reshaped(net.input_shape().to_vec()).context("stage `load data`")?;
    Ok((net, d))
}

fn attack_cmd(a: AttackArgs) -> Result<()> {
    let (net, data) = model_and_data(&a.model, &a.data)?;
    let mut cfg = match a.attack {
        AttackKind::Fgsm => AttackConfig::fgsm(a.epsilon),
        AttackKind::Pgd => AttackConfig::pgd(a.epsilon, a.steps, a.seed),
        AttackKind::Cw => AttackConfig::cw(a.epsilon, a.steps, a.seed),
    };
    if let Some(s) = a.step_size {
        cfg.step_size = s;
    }
    let report = evaluate_attack(&net, &data, &cfg).context("stage `attack`")?;
    match &a.out {
        Some(p) => {
            write_file(p, &report.to_csv()).context("stage `write results`")?;
            println!("adversarial accuracy {:.4} over {} samples", report.accuracy, data.len());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn surface_cmd(a: SurfaceArgs) -> Result<()> {
    let (net, data) = model_and_data(&a.model, &a.data)?;
    if a.center >= data.len() {
        bail!("stage `surface`: center {} outside dataset of {}", a.center, data.len());
    }
    let beta: BetaKind = a.beta.parse().context("stage `surface`")?;
    let kind: SurfaceKind = a.kind.parse().context("stage `surface`")?;
    let x = data.tensor(a.center);
    let label = data.label(a.center);
    let dirs = DirectionPair::build(&net, &x, label, beta, a.step, a.seed).context("stage `directions`")?;
    let grid = sample_surface(&net, &x, a.center, label, &dirs, a.half_extent, kind).context("stage `surface`")?;
    export_grid(&grid, &a.out).context("stage `write grid`")?;
    println!(
        "{}x{} {} grid, center value {:.6}, {} clipped cells -> {}",
        grid.side(),
        grid.side(),
        kind.as_str(),
        grid.center_value(),
        grid.clipped_cells,
        a.out.display()
    );
    Ok(())
}

fn metric_cmd(a: MetricArgs) -> Result<()> {
    let (net, data) = model_and_data(&a.model, &a.data)?;
    let batch = data.take(a.batch);
    let mut cfg = MetricConfig::new(a.epsilon, a.seed);
    cfg.restarts = a.restarts;
    cfg.ascent_steps = a.steps;
    let tag = match &a.dataset {
        Some(name) => name.parse::<DatasetTag>()?,
        None if a.data.is_mnist() => DatasetTag::Mnist,
        None => DatasetTag::Other,
    };
    let report = if a.softmax {
        psi_unnormalized(&net, &batch, &cfg)
    } else {
        psi(&net, &batch, &cfg, tag)
    }
    .context("stage `metric`")?;
    let summary = report.summary_block();
    if let Some(p) = &a.report {
        write_file(p, &report.to_csv()).context("stage `write report`")?;
    }
    print!("{summary}");
    Ok(())
}

fn experiment_cmd(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config).context("stage `load config`")?;
    let manifest = run_experiment(&cfg)?;
    println!("{} run, config hash {}", manifest.kind, manifest.config_hash);
    for f in &manifest.files {
        println!("  {}  {}", f.sha256, f.path);
    }
    println!("manifest: {}", cfg.output_dir.join(advrobust::harness::MANIFEST_FILE).display());
    Ok(())
}

fn model_info(path: &Path) -> Result<()> {
    let net = load_model(path).context("stage `load model`")?;
    println!("input shape   {:?}", net.input_shape());
    println!("classes       {}", net.num_classes());
    println!("parameters    {}", net.num_params());
    println!("layers");
    for (i, l) in net.layers().iter().enumerate() {
        let desc = match *l {
            LayerSpec::Dense { in_dim, out_dim } => format!("dense {in_dim} -> {out_dim}"),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride } => {
                format!("conv2d {in_ch} -> {out_ch}, kernel {kernel}, stride {stride}")
            }
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Relu => "relu".into(),
        };
        println!("  {i:>2}  {desc}");
    }
    if !net.provenance.is_empty() {
        println!("provenance");
        for (k, v) in &net.provenance {
            println!("  {k} = {v}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons() -> Dataset {
        two_moons(20, 0.05, &mut advrobust::rng(0))
    }

    #[test]
    fn arch_strings() {
        let dense = |a: &Architecture| {
            a.layers
                .iter()
                .filter_map(|l| match l {
                    LayerSpec::Dense { out_dim, .. } => Some(*out_dim),
                    _ => None,
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(dense(&parse_arch("mlp:8x4", &moons()).unwrap()), [8, 4, 2]);
        assert_eq!(dense(&parse_arch("mlp:", &moons()).unwrap()), [2]);
    }

    #[test]
    fn bad_arch_strings_are_rejected() {
        for bad in ["mlp:8xx4", "mlp:a", "resnet", "lenet"] {
            assert!(parse_arch(bad, &moons()).is_err(), "{bad}");
        }
    }
}
