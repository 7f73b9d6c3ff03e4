//! End-to-end tests of the `lgnn` binary: flags, config files, output files
//! and failure modes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lgnn::graph::{save_bundle, synthetic_graph, SyntheticKind, SyntheticSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lgnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// 60-node two-block SBM bundle saved to `dir`.
fn write_bundle(dir: &Path) {
    let bundle = synthetic_graph(&SyntheticSpec {
        kind: SyntheticKind::Sbm {
            p_in: 0.4,
            p_out: 0.05,
        },
        n: 60,
        feature_dim: 8,
        num_classes: 3,
        seed: 11,
    })
    .unwrap();
    save_bundle(&bundle, dir).unwrap();
}

fn small_config(dataset: &Path, out: &Path) -> String {
    format!(
        r#"
dataset = "{}"
out = "{}"

[model]
dropout = 0.0

[train]
seeds = [0, 1]
max_epochs = 5
patience = 5

[split]
per_class_train = 5
val_size = 12
test_size = 12
seed = 0
mode = "seeded_random"
"#,
        dataset.display(),
        out.display()
    )
}

#[test]
fn train_writes_result_curves_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    write_bundle(&data);
    let config_path = tmp.path().join("exp.toml");
    fs::write(&config_path, small_config(&data, &out)).unwrap();

    let res = run(&["train", "--config", config_path.to_str().unwrap()]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));

    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert!(result["config_fingerprint"].as_str().unwrap().len() == 64);
    let per_seed = result["per_seed"].as_array().unwrap();
    assert_eq!(per_seed.len(), 2);
    for entry in per_seed {
        for key in ["seed", "test_accuracy", "micro_f", "macro_f", "best_epoch", "wall_ms"] {
            assert!(!entry[key].is_null(), "missing per-seed key {key}");
        }
    }
    for key in ["mean_accuracy", "std_accuracy", "mean_micro_f", "std_micro_f"] {
        assert!(!result["aggregate"][key].is_null(), "missing aggregate key {key}");
    }
    for key in ["global", "localization", "total"] {
        assert!(!result["param_counts"][key].is_null(), "missing param_counts key {key}");
    }

    let curves = fs::read_to_string(out.join("curves.tsv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed\tepoch\ttrain_loss\tval_loss\tval_accuracy"
    );
    // 2 seeds x 5 epochs
    assert_eq!(lines.count(), 10);

    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("max_epochs = 5"));
}

#[test]
fn train_respects_overwrite_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    write_bundle(&data);
    let config_path = tmp.path().join("exp.toml");
    fs::write(&config_path, small_config(&data, &out)).unwrap();

    let first = run(&["train", "--config", config_path.to_str().unwrap(), "--seeds", "1"]);
    assert!(first.status.success(), "stderr: {}", stderr(&first));
    let second = run(&["train", "--config", config_path.to_str().unwrap(), "--seeds", "1"]);
    assert!(!second.status.success());
    assert!(stderr(&second).contains("--overwrite"));
    let third = run(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--seeds",
        "1",
        "--overwrite",
    ]);
    assert!(third.status.success(), "stderr: {}", stderr(&third));
}

#[test]
fn missing_dataset_exits_nonzero_without_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = run(&[
        "train",
        "--dataset",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = stderr(&res);
    assert_eq!(err.lines().count(), 1, "expected one-line error, got: {err}");
    assert!(err.starts_with("error: "));
    assert!(!out.exists());
}

#[test]
fn flag_overrides_beat_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    write_bundle(&data);
    let config_path = tmp.path().join("exp.toml");
    fs::write(&config_path, small_config(&data, &out)).unwrap();

    let res = run(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--hidden",
        "16",
        "--seeds",
        "1",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));
    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("hidden_dim = 16"));
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["per_seed"].as_array().unwrap().len(), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("exp.toml");
    fs::write(&config_path, "mystery_knob = true\n").unwrap();
    let res = run(&["train", "--config", config_path.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(stderr(&res).contains("mystery_knob"));
}

#[test]
fn ablate_emits_four_variants_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    write_bundle(&data);
    let config_path = tmp.path().join("exp.toml");
    fs::write(&config_path, small_config(&data, &out)).unwrap();

    let res = run(&[
        "ablate",
        "--config",
        config_path.to_str().unwrap(),
        "--seeds",
        "1",
        "--max-epochs",
        "3",
        "--patience",
        "3",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));

    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant\tmean_accuracy\tstd_accuracy");
    assert_eq!(lines.len(), 5);
    let variants: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(variants, ["none", "node", "edge", "both"]);
    for v in variants {
        let file = out.join(format!("result-{v}.json"));
        assert!(file.exists(), "missing {}", file.display());
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&file).unwrap()).unwrap();
        // identical seed list recorded in every variant
        assert_eq!(json["per_seed"][0]["seed"], 0);
    }
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let pass = run(&[
        "gradcheck",
        "--model",
        "lgcn",
        "--synthetic",
        "er:12:0.3",
        "--features",
        "5",
        "--classes",
        "2",
        "--hidden",
        "4",
    ]);
    assert!(pass.status.success(), "stderr: {}", stderr(&pass));
    assert!(stdout(&pass).contains("gradcheck passed"));

    let fail = run(&[
        "gradcheck",
        "--model",
        "lgcn",
        "--synthetic",
        "er:12:0.3",
        "--features",
        "5",
        "--classes",
        "2",
        "--hidden",
        "4",
        "--tol",
        "1e-13",
    ]);
    assert!(!fail.status.success());
    assert!(stderr(&fail).contains("exceeds tolerance"));
}

#[test]
fn ingest_toy_fixture_and_malformed_line() {
    let tmp = tempfile::tempdir().unwrap();
    let content = tmp.path().join("toy.content");
    let cites = tmp.path().join("toy.cites");
    fs::write(&content, "p1\t1\t0\tml\np2\t0\t1\tdb\np3\t1\t1\tml\n").unwrap();
    fs::write(&cites, "p1\tp2\np2\tp3\n").unwrap();
    let out = tmp.path().join("bundle");

    let res = run(&[
        "ingest",
        content.to_str().unwrap(),
        cites.to_str().unwrap(),
        out.to_str().unwrap(),
        "--name",
        "toy",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr(&res));
    assert!(stdout(&res).contains("3 nodes"));
    assert!(out.join("meta.json").exists());

    // node id with no label field
    fs::write(&content, "p1\t1\t0\tml\nbroken-line\n").unwrap();
    let bad = run(&[
        "ingest",
        content.to_str().unwrap(),
        cites.to_str().unwrap(),
        tmp.path().join("bundle2").to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
    assert!(
        stderr(&bad).contains("toy.content:2"),
        "stderr: {}",
        stderr(&bad)
    );
}

#[test]
fn params_prints_ledger_totals() {
    let res = run(&["params", "--model", "lgcn"]);
    assert!(res.status.success());
    let out = stdout(&res);
    assert!(out.contains("total 103584 (global 11520, localization 92064)"));

    let res = run(&["params", "--model", "gcn"]);
    assert!(stdout(&res).contains("total 11520"));
}
