use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedmerge::checkpoint::{read_checkpoint, write_checkpoint, write_training_meta};
use fedmerge::{ParamMap, TrainingMeta};
use tempfile::TempDir;

fn fedmerge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmerge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn map(w: &[f32], b: &[f32]) -> ParamMap {
    ParamMap::from_entries([("layer.bias", vec![b.len()], b.to_vec()), ("layer.weight", vec![w.len()], w.to_vec())])
        .unwrap()
}

/// Base plus two fine-tuned checkpoints and their metadata.
fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    write_checkpoint(&map(&[0.5, -1.0, 2.0], &[0.1]), p.join("base.ckpt")).unwrap();
    write_checkpoint(&map(&[1.5, -1.0, 2.5], &[0.0]), p.join("a.ckpt")).unwrap();
    write_checkpoint(&map(&[0.25, 0.0, 2.0], &[0.3]), p.join("b.ckpt")).unwrap();
    write_training_meta(p.join("a.meta.json"), "a", &TrainingMeta::constant(0.1, 10).unwrap()).unwrap();
    write_training_meta(p.join("b.meta.json"), "b", &TrainingMeta::constant(0.1, 1).unwrap()).unwrap();
    dir
}

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

const TA: &[&str] = &["merge", "--pretrained", "base.ckpt", "--finetuned", "a.ckpt", "--finetuned", "b.ckpt"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn merge_happy_path_writes_checkpoint_and_report() {
    let dir = fixture();
    let out = fedmerge(dir.path(), &with(TA, &["--method", "ta", "--lambda", "0.3", "--out", "m.ckpt"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let merged = read_checkpoint(dir.path().join("m.ckpt")).unwrap();
    let w = merged.get("layer.weight").unwrap().data();
    assert!((w[0] - (0.5 + 0.3 * (1.0 - 0.25))).abs() < 1e-6);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("m.ckpt.report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "ta");
    assert_eq!(report["diagnostics"]["per_task_norms"].as_array().unwrap().len(), 2);
}

#[test]
fn fednova_without_meta_exits_4_and_names_the_file() {
    let dir = fixture();
    let out = fedmerge(dir.path(), &with(TA, &["--method", "fednova", "--lambda", "1", "--out", "n.ckpt"]));
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("a.ckpt"), "{}", stderr(&out));
    assert!(!dir.path().join("n.ckpt").exists());
}

#[test]
fn fednova_with_meta_reports_weights() {
    let dir = fixture();
    let args = with(
        TA,
        &["--method", "fednova", "--lambda", "1", "--meta", "a.meta.json", "--meta", "b.meta.json", "--out", "n.ckpt"],
    );
    let out = fedmerge(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("n.ckpt.report.json")).unwrap()).unwrap();
    let w: Vec<f64> = serde_json::from_value(report["diagnostics"]["weights"].clone()).unwrap();
    assert!((w[0] - 10.0 / 11.0).abs() < 1e-12 && (w[1] - 1.0 / 11.0).abs() < 1e-12, "{w:?}");
}

#[test]
fn median_of_two_is_bytewise_ta_at_half_lambda() {
    let dir = fixture();
    let med = fedmerge(dir.path(), &with(TA, &["--method", "median", "--lambda", "0.7", "--out", "med.ckpt"]));
    let ta = fedmerge(dir.path(), &with(TA, &["--method", "ta", "--lambda", "0.35", "--out", "ta.ckpt"]));
    assert_eq!((code(&med), code(&ta)), (0, 0));
    assert_eq!(
        std::fs::read(dir.path().join("med.ckpt")).unwrap(),
        std::fs::read(dir.path().join("ta.ckpt")).unwrap()
    );
}

#[test]
fn flag_errors_exit_2_before_writing() {
    let dir = fixture();
    let before = entries(dir.path());
    for extra in [
        &["--method", "fedgma", "--lambda", "1", "--out", "x.ckpt"][..],
        &["--method", "fedgma", "--lambda", "1", "--rho", "1.5", "--out", "x.ckpt"],
        &["--method", "ta", "--lambda", "1", "--rho", "0.5", "--out", "x.ckpt"],
        &["--method", "ties", "--lambda", "1", "--out", "x.ckpt"],
        &["--method", "ta", "--lambda", "1"],
        &["--method", "ta", "--out", "x.ckpt"],
    ] {
        let out = fedmerge(dir.path(), &with(TA, extra));
        assert_eq!(code(&out), 2, "{extra:?}: {}", stderr(&out));
    }
    let out = fedmerge(dir.path(), &with(TA, &["--method", "ta", "--lambda", "1", "--meta", "a.meta.json", "--out", "x.ckpt"]));
    assert_eq!(code(&out), 2);
    assert_eq!(entries(dir.path()), before);
}

#[test]
fn schema_and_format_errors_exit_3() {
    let dir = fixture();
    write_checkpoint(&map(&[1.0, 2.0], &[0.0]), dir.path().join("short.ckpt")).unwrap();
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let before = entries(dir.path());
    for bad in ["short.ckpt", "junk.ckpt", "missing.ckpt"] {
        let args = ["merge", "--method", "ta", "--lambda", "1", "--pretrained", "base.ckpt", "--finetuned", bad, "--out", "x.ckpt"];
        let out = fedmerge(dir.path(), &args);
        assert_eq!(code(&out), 3, "{bad}: {}", stderr(&out));
        assert!(stderr(&out).contains(bad), "{}", stderr(&out));
    }
    let out = fedmerge(dir.path(), &["inspect", "--pretrained", "base.ckpt", "--finetuned", "short.ckpt"]);
    assert_eq!(code(&out), 3);
    assert_eq!(entries(dir.path()), before);
}

#[test]
fn inspect_reports_norms_cosines_and_outliers() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let base = ParamMap::vector("w", vec![0.0; 4]).unwrap();
    write_checkpoint(&base, p.join("base.ckpt")).unwrap();
    write_checkpoint(&ParamMap::vector("w", vec![1.0, 0.0, 0.0, 0.0]).unwrap(), p.join("e1.ckpt")).unwrap();
    write_checkpoint(&ParamMap::vector("w", vec![0.0, 1.0, 0.0, 0.0]).unwrap(), p.join("e2.ckpt")).unwrap();
    write_checkpoint(&ParamMap::vector("w", vec![0.0, 0.0, 10.0, 0.0]).unwrap(), p.join("big.ckpt")).unwrap();
    write_checkpoint(&base, p.join("same.ckpt")).unwrap();

    let out = fedmerge(p, &["inspect", "--pretrained", "base.ckpt", "--finetuned", "e1.ckpt", "--finetuned", "e2.ckpt", "--out", "i.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("i.json")).unwrap()).unwrap();
    assert_eq!(report["norms"], serde_json::json!([1.0, 1.0]));
    assert_eq!(report["cosine_similarity"][0][1], 0.0);
    assert!(!stdout(&out).contains("warning"));

    let out = fedmerge(p, &["inspect", "--pretrained", "base.ckpt", "--finetuned", "same.ckpt"]);
    assert!(stdout(&out).contains("0.000000"));

    let args = ["inspect", "--pretrained", "base.ckpt", "--finetuned", "e1.ckpt", "--finetuned", "e2.ckpt", "--finetuned", "big.ckpt"];
    let out = fedmerge(p, &args);
    assert_eq!(code(&out), 0);
    let warnings: Vec<_> = stdout(&out).lines().filter(|l| l.starts_with("warning (heuristic)")).map(str::to_owned).collect();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("big.ckpt"));
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.json");
    std::fs::write(&path, body).unwrap();
    path
}

const ONE_ROUND: &str = r#"{
    "schema_version": 1,
    "family": { "kind": "quadratic", "num_tasks": 3, "dim": 5, "zeta_target": 1.0, "b_target": 2.0, "noise_sigma": 0.1, "seed": 11 },
    "schedules": [ { "learning_rate": 0.1, "steps": 7 }, { "learning_rates": [0.2, 0.1, 0.05] }, { "learning_rate": 0.05, "steps": 12 } ],
    "rounds": 1,
    "lambda": 0.4,
    "seed": 2,
    "dump_task_vectors": true
}"#;

#[test]
fn simulate_one_round_matches_cli_merge_of_dumped_vectors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    write_config(p, ONE_ROUND);
    let out = fedmerge(p, &["simulate", "--config", "exp.json", "--out", "sim"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["report.json", "rounds.csv", "theta0.ckpt", "task_0.ckpt", "task_2.ckpt", "task_1.meta.json"] {
        assert!(p.join("sim").join(f).exists(), "{f}");
    }
    let merge = fedmerge(
        p,
        &[
            "merge", "--method", "ta", "--lambda", "0.4", "--pretrained", "sim/theta0.ckpt", "--finetuned", "sim/task_0.ckpt",
            "--finetuned", "sim/task_1.ckpt", "--finetuned", "sim/task_2.ckpt", "--out", "m.ckpt",
        ],
    );
    assert_eq!(code(&merge), 0, "{}", stderr(&merge));
    let merged = read_checkpoint(p.join("m.ckpt")).unwrap().flatten();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("sim/report.json")).unwrap()).unwrap();
    let theta: Vec<f64> = serde_json::from_value(report["final_theta"].clone()).unwrap();
    let err: f64 = merged.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(err / norm <= 1e-6, "relative error {}", err / norm);

    let csv = std::fs::read_to_string(p.join("sim/rounds.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("round,loss,suboptimality,het_at_point"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn simulate_is_deterministic_and_converges_without_heterogeneity() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    write_config(
        p,
        r#"{
        "schema_version": 1,
        "family": { "kind": "quadratic", "num_tasks": 4, "dim": 6, "zeta_target": 0.0, "b_target": 3.0 },
        "schedules": [ { "learning_rate": 0.2, "steps": 200 } ],
        "rounds": 2,
        "beta": 1.0
    }"#,
    );
    let a = fedmerge(p, &["simulate", "--config", "exp.json", "--out", "a", "--seed", "9"]);
    let b = fedmerge(p, &["simulate", "--config", "exp.json", "--out", "b", "--seed", "9"]);
    assert_eq!((code(&a), code(&b)), (0, 0), "{}", stderr(&a));
    let ra = std::fs::read(p.join("a/report.json")).unwrap();
    assert_eq!(ra, std::fs::read(p.join("b/report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert!(report["final_suboptimality"].as_f64().unwrap() <= 1e-8);
    assert!(!p.join("a/theta0.ckpt").exists());
}

#[test]
fn simulate_config_errors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    write_config(p, &ONE_ROUND.replace("\"schema_version\": 1", "\"schema_version\": 7"));
    let out = fedmerge(p, &["simulate", "--config", "exp.json", "--out", "sim"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("exp.json"));
    assert!(!p.join("sim").exists());
    let out = fedmerge(p, &["simulate", "--config", "exp.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn simulate_oracle_failure_exits_5() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    // a nonconvex MLP family: plain gradient descent cannot certify a 1e-8 stationary point
    write_config(
        p,
        r#"{
        "schema_version": 1,
        "family": { "kind": "tiny_mlp", "num_tasks": 2, "dim": 4, "zeta_target": 1.0, "b_target": 0.0, "samples_per_task": 16 },
        "schedules": [ { "learning_rate": 0.1, "steps": 5 } ],
        "rounds": 1,
        "lambda": 0.5
    }"#,
    );
    let out = fedmerge(p, &["simulate", "--config", "exp.json", "--out", "sim"]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert!(!p.join("sim/report.json").exists());
}

#[test]
fn sweep_default_grids_and_csv_hook() {
    let dir = fixture();
    let p = dir.path();
    let sweep = |method: &str, eval: &str, extra: &[&str]| {
        let mut args = vec!["sweep", "--method", method, "--pretrained", "base.ckpt", "--finetuned", "a.ckpt", "--finetuned", "b.ckpt"];
        args.extend_from_slice(&["--eval-config", eval, "--out", "sw"]);
        args.extend_from_slice(extra);
        fedmerge(p, &args)
    };
    // scores peak at lambda = 0.35 (and rho = 0.4 for fedgma)
    let mut csv = String::from("lambda,rho,score\n");
    for k in 1..=40 {
        let lambda = k as f64 / 20.0;
        csv.push_str(&format!("{lambda},,{}\n", -(lambda - 0.35f64).abs()));
        for j in 1..=10 {
            let rho = j as f64 / 10.0;
            csv.push_str(&format!("{lambda},{rho},{}\n", -(lambda - 0.35f64).abs() - (rho - 0.4f64).abs()));
        }
    }
    std::fs::write(p.join("scores.csv"), csv).unwrap();
    std::fs::write(p.join("eval.json"), r#"{"evaluator": "scores_csv", "path": "scores.csv"}"#).unwrap();

    let out = sweep("ta", "eval.json", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(p.join("sw/scores.csv")).unwrap();
    assert_eq!(table.lines().count(), 41);
    let best: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("sw/best.json")).unwrap()).unwrap();
    assert_eq!(best["lambda"], 0.35);
    assert!(p.join("sw/best.ckpt").exists());

    let out = sweep("fedgma", "eval.json", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(p.join("sw/scores.csv")).unwrap();
    assert_eq!(table.lines().count(), 401);
    let best: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("sw/best.json")).unwrap()).unwrap();
    assert_eq!((best["lambda"].as_f64(), best["rho"].as_f64()), (Some(0.35), Some(0.4)));

    let out = sweep("median", "eval.json", &["--lambdas", "1.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let best: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("sw/best.json")).unwrap()).unwrap();
    assert_eq!((best["lambda"].as_f64(), best["cells"].as_u64()), (Some(1.5), Some(1)));

    assert_eq!(code(&sweep("ta", "eval.json", &["--rhos", "0.5"])), 2);
    assert_eq!(code(&sweep("ta", "missing.json", &[])), 3);
}

#[test]
fn toy_export_feeds_the_bundled_evaluator() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let out = fedmerge(p, &["toy", "--out", "toy", "--heterogeneous", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("toy/task_1.meta.json")).unwrap()).unwrap();
    let slow: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("toy/task_0.meta.json")).unwrap()).unwrap();
    assert!((meta["learning_rate"].as_f64().unwrap() / slow["learning_rate"].as_f64().unwrap() - 10.0).abs() < 1e-12);

    let args = [
        "sweep", "--method", "cclip", "--pretrained", "toy/base.ckpt", "--finetuned", "toy/task_0.ckpt", "--finetuned",
        "toy/task_1.ckpt", "--eval-config", "toy/eval.json", "--out", "sw",
    ];
    let out = fedmerge(p, &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(p.join("sw/scores.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 40 * 5);
    let best: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("sw/best.json")).unwrap()).unwrap();
    let score = best["score"].as_f64().unwrap();
    assert!(score > 0.5 && score.is_finite(), "{score}");
}
