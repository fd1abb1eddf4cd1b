use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_augdetect");
/// Allowed gap between the held-out clean rejection rate and the target.
const FPR_BAND: f64 = 0.03;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "{args:?} failed:\n{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    stdout
}

fn summary(out: &Path, run: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("runs").join(run).join("summary.json")).unwrap()).unwrap()
}

fn entries(p: &Path) -> usize {
    std::fs::read_dir(p).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn unknown_flag_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&out, &["gen-data", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(run(&out, &["--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_are_tagged_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&out, &["calibrate", "--target-fpr", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:detector:"), "{err}");
    assert!(std::fs::read_to_string(out.join("error.log")).unwrap().contains("error:detector:"));
    let o = run(&out, &["train-clf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&out, &["gen-data"]);
    for split in ["train", "calib", "test"] {
        assert!(out.join("data").join(format!("{split}.bynd")).exists());
    }
    ok(&out, &["train-clf"]);
    ok(&out, &["train-ssl"]);
    ok(&out, &["probe"]);
    ok(&out, &["calibrate"]);
    let th: Value = serde_json::from_str(&std::fs::read_to_string(out.join("thresholds.json")).unwrap()).unwrap();
    let target = th["thresholds"]["target_fpr"].as_f64().unwrap();

    ok(&out, &["detect", "--input", out.join("data/test.bynd").to_str().unwrap()]);
    let fpr = summary(&out, "detect-test")["fpr"].as_f64().unwrap();
    assert!((fpr - target).abs() <= FPR_BAND, "held-out clean FPR {fpr} vs target {target}");

    ok(&out, &["attack", "--kind", "pgd", "--eps", "16/255", "--limit", "40"]);
    ok(&out, &["detect", "--input", out.join("adv/pgd.bynd").to_str().unwrap()]);
    let s = summary(&out, "detect-pgd");
    assert!(s["tpr"].as_f64().is_some() && s["robust_accuracy"].as_f64().is_some());

    let eval = ["eval", "--kind", "pgd", "--eps", "16/255", "--limit", "40", "--k", "10", "--run-id", "e"];
    ok(&out, &eval);
    let run_dir = out.join("runs").join("e");
    let read_all = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let first = read_all(&run_dir);
    for f in ["metrics.csv", "summary.json", "config.json", "roc_combined.svg"] {
        assert!(first.iter().any(|(n, _)| n == f), "missing {f}");
    }
    let before = entries(&out.join("runs"));
    let o = run(&out, &eval);
    assert_eq!(o.status.code(), Some(1), "rerun without --force must refuse");
    assert_eq!(entries(&out.join("runs")), before);
    let mut forced = eval.to_vec();
    forced.push("--force");
    ok(&out, &forced);
    assert_eq!(read_all(&run_dir), first, "forced rerun is byte-identical");

    ok(&out, &["sweep", "--sweep", "neighbors", "--grid", "2,4", "--limit", "10", "--kind", "fgsm"]);
    assert!(out.join("runs/sweep-neighbors/sweep_neighbors.csv").exists());
    ok(&out, &["cost", "--samples", "2", "--k", "4"]);
    assert!(summary(&out, "cost")["params"].as_u64().unwrap() > 0);
    ok(&out, &["theory", "--samples", "4", "--eps", "16/255"]);
    ok(&out, &["report"]);
    assert!(out.join("runs/report/report.csv").exists());
}
