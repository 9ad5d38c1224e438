//! End-to-end runs of the `cfn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cfn_core::data::load_dataset;
use cfn_core::metrics::MetricsReport;
use cfn_core::stats::CooccurrenceStats;

fn cfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic_and_creates_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = cfn(&["synth", "--n", "300", "--seed", "7", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["dataset.jsonl", "planted.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
    }
    assert_eq!(load_dataset(a.join("dataset.jsonl")).unwrap().len(), 300);
    assert!(a.join("config.resolved.toml").exists());
}

#[test]
fn invalid_table_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    let row = vec!["1.5"; 26].join(", ");
    fs::write(&config, format!("[synth]\nn_clusters = 1\n[synth.table]\nrows = [[{row}]]\n")).unwrap();
    let o = cfn(&["synth", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("planted table"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "[run.train]\nlearning_rate = 0.1\n").unwrap();
    let o = cfn(&["gradcheck", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_on_a_noiseless_set_recover_the_planted_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    let row: Vec<&str> = (0..26).map(|i| if i % 3 == 0 { "1.0" } else { "0.0" }).collect();
    fs::write(
        &config,
        format!(
            "[synth]\nn = 300\nn_clusters = 1\nnoise = 0.0\n[synth.table]\nrows = [[{}]]\n",
            row.join(", ")
        ),
    )
    .unwrap();
    let data_dir = dir.path().join("data");
    assert!(cfn(&["synth", "--config", path(&config), "--out", path(&data_dir)]).status.success());
    let out = dir.path().join("stats");
    let data = data_dir.join("dataset.jsonl");
    let o = cfn(&["stats", "--data", path(&data), "--threshold", "0.01", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = CooccurrenceStats::load_json(out.join("stats.json")).unwrap();
    assert_eq!(stats.threshold_attr, 0.01);
    let expected: Vec<f64> = row.iter().map(|v| v.parse().unwrap()).collect();
    for a in 0..stats.n_attributes() {
        assert_eq!(stats.p_plus.row(a), expected.as_slice());
    }
    let json = fs::read_to_string(out.join("stats.json")).unwrap();
    assert!(json.contains("\"threshold_attr\": 0.01"));
    let csv = fs::read_to_string(out.join("p_plus.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + stats.n_attributes());
}

#[test]
fn stats_on_an_empty_dataset_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "").unwrap();
    let o = cfn(&["stats", "--data", path(&data), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_case_and_catches_a_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfn(&["gradcheck", "--points", "10", "--out", path(dir.path())]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let cases = cfn_core::checks::case_names();
    assert_eq!(csv.lines().count(), 1 + cases.len());
    for name in cases {
        assert!(csv.contains(&format!("\n{name},")), "{name}");
    }
    let o = cfn(&["gradcheck", "--points", "3", "--inject-sign-flip", "pipeline", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    assert!(cfn(&["synth", "--n", "400", "--out", path(&data_dir)]).status.success());
    let data = data_dir.join("dataset.jsonl");
    let run = |out: &Path| {
        let o = cfn(&["train", "--data", path(&data), "--max-epochs", "2", "--seed", "3", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history, fs::read_to_string(b.join("history.csv")).unwrap());
    assert!(history.starts_with("epoch,lr,train_loss,val_loss\n0,0.01,"));
    assert_eq!(fs::read(a.join("model.json")).unwrap(), fs::read(b.join("model.json")).unwrap());

    let eval = dir.path().join("eval");
    let o = cfn(&[
        "eval",
        "--checkpoint",
        path(&a.join("model.json")),
        "--data",
        path(&a.join("test.jsonl")),
        "--trace",
        "--jobs",
        "3",
        "--out",
        path(&eval),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fresh: MetricsReport = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    let trained: MetricsReport = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(fresh, trained);
    let traces = fs::read_to_string(eval.join("trace.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), fresh.n);
    assert!(traces.contains("\"P_hat\""));
}

#[test]
fn eval_of_perfect_and_constant_predictions() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cfn(&["synth", "--n", "200", "--out", path(dir.path())]).status.success());
    let data = dir.path().join("dataset.jsonl");
    let ds = load_dataset(&data).unwrap();

    let write_preds = |name: &str, rows: Vec<Vec<f64>>| {
        let p = dir.path().join(name);
        let text: String = rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        fs::write(&p, text).unwrap();
        p
    };
    let eval = |preds: &Path| -> MetricsReport {
        let out = dir.path().join("eval");
        let o = cfn(&["eval", "--data", path(&data), "--predictions", path(preds), "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap()
    };

    let perfect = write_preds("perfect.jsonl", ds.targets().iter().map(|t| t.to_vec()).collect());
    let r = eval(&perfect);
    assert_eq!((r.ap.mean, r.ra.mean, r.f1.mean, r.r2.mean), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));

    let n = ds.len() as f64;
    let means: Vec<f64> = (0..29).map(|d| ds.targets().iter().map(|t| t[d]).sum::<f64>() / n).collect();
    let constant = write_preds("constant.jsonl", vec![means; ds.len()]);
    let r = eval(&constant);
    assert!(r.r2.mean.unwrap().abs() < 1e-9);
    assert!(r.ers_mixed.is_some());
}

#[test]
fn ers_only_reproduces_a_published_score() {
    let o = cfn(&["eval", "--ers-only", "0.1493", "23.18", "71.56"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "66.33");
    let o = cfn(&["eval", "--ers-only", "0.1493", "23.18", "71.56", "--convention", "uniform"]);
    let uniform: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((uniform - 83.64).abs() <= 0.05, "{uniform}");
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    assert!(cfn(&["synth", "--n", "300", "--out", path(&data_dir)]).status.success());
    let out = dir.path().join("ablate");
    let o = cfn(&[
        "ablate",
        "--data",
        path(&data_dir.join("dataset.jsonl")),
        "--max-epochs",
        "1",
        "--jobs",
        "2",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for v in ["full", "emotion_only", "no_place", "no_object", "q_plus_only", "intermediate_concat"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{v},"))), "{v}");
        assert!(out.join(v).join("model.json").exists());
    }
}
