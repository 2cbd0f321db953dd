use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advrobust"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_on_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.csv");
    let model = dir.path().join("model.json");
    run(&["gen-data", "--kind", "blobs", "--n", "90", "--classes", "3", "--seed", "4", "--out", p(&data)]);
    assert!(std::fs::read_to_string(&data).unwrap().lines().count() == 91);

    let out = run(&[
        "train", "--data", p(&data), "--arch", "mlp:8", "--epochs", "20", "--batch-size", "16", "--lr", "0.5",
        "--out", p(&model),
    ]);
    assert!(stdout(&out).contains("train accuracy"));

    let info = stdout(&run(&["model-info", p(&model)]));
    assert!(info.contains("dense 2 -> 8") && info.contains("regime = natural"), "{info}");

    let results = dir.path().join("pgd.csv");
    run(&["attack", "--model", p(&model), "--data", p(&data), "--epsilon", "0.05", "--steps", "5", "--out", p(&results)]);
    let csv = std::fs::read_to_string(&results).unwrap();
    assert!(csv.starts_with("sample_id,true_label,clean_pred,adv_pred,success,linf_used\n"));
    assert_eq!(csv.lines().count(), 91);

    let grid = dir.path().join("grid.csv");
    run(&[
        "surface", "--model", p(&model), "--data", p(&data), "--center", "3", "--beta", "fgsm", "--step", "0.01",
        "--half-extent", "3", "--out", p(&grid),
    ]);
    let g = advrobust::surface::import_grid(&grid).unwrap();
    assert_eq!(g.side(), 7);

    let report = dir.path().join("metric.csv");
    let summary = stdout(&run(&[
        "metric", "--model", p(&model), "--data", p(&data), "--epsilon", "0.05", "--batch", "20", "--steps", "5",
        "--report", p(&report),
    ]));
    assert!(summary.contains("# psi_model=") && summary.contains("# grade=Ungraded"), "{summary}");
    assert!(std::fs::read_to_string(&report).unwrap().contains("sample,max_kl\n"));
}

#[test]
fn experiment_verb_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("exp.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
  "kind": "batch_stability",
  "dataset": {{"source": "moons", "n": 80, "noise_std": 0.05, "seed": 1}},
  "train_dataset": {{"source": "moons", "n": 80, "noise_std": 0.05, "seed": 2}},
  "models": [{{"name": "m", "architecture": {{"type": "mlp", "hidden": [6]}},
              "train": {{"regime": "natural", "epochs": 3, "batch_size": 8, "learning_rate": 0.2, "seed": 0}}}}],
  "metric": {{"epsilon": 0.05, "ascent_steps": 3, "restarts": 1}},
  "stability": {{"batch_sizes": [10, 20], "permutations": 2}},
  "output_dir": "{}",
  "seed": 9
}}"#,
            p(&out_dir)
        ),
    )
    .unwrap();
    let text = stdout(&run(&["experiment", p(&config)]));
    assert!(text.contains("batch_stability run"));
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("batch_stability.csv").exists());
}

#[test]
fn failures_exit_nonzero_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["model-info", p(&dir.path().join("missing.json"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `load model`"), "{err}");

    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"kind": "nonsense"}"#).unwrap();
    let out = bin().args(["experiment", p(&config)]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `load config`") && err.contains("nonsense"), "{err}");
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = bin().env("ADVROBUST_THREADS", "many").args(["model-info", "x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ADVROBUST_THREADS"));
}
