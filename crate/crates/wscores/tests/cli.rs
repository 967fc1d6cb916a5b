//! End-to-end checks of the command-line interface: verbs, exit codes, and
//! determinism of emitted reports.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wscores"))
}

fn demo_csv(dir: &std::path::Path) -> PathBuf {
    // Deterministic correlated binary panel, written by the library itself.
    let design = wscores::sim::builtin_design("table3-ex", 60, 1, 99).unwrap();
    let data = wscores::sim::simulate_dataset(&design, 0);
    let names: Vec<String> = vec!["x1".into(), "treat".into(), "time".into()];
    let path = dir.join("demo.csv");
    wscores::io::write_dataset(&path, &data, &names).unwrap();
    path
}

#[test]
fn fit_writes_reports_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = demo_csv(dir.path());
    let out = dir.path().join("fit");
    let status = bin()
        .args([
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--family",
            "logit",
            "--structure",
            "exch",
            "--no-intercept",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(status.status.success(), "{status:?}");
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.contains("Est."));
    assert!(out.with_extension("txt").exists());
    let jsonl = std::fs::read_to_string(out.with_extension("jsonl")).unwrap();
    let record: wscores::io::FitRecord = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(record.structure, "exch");
    assert!(record.converged);
}

#[test]
fn select_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = demo_csv(dir.path());
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let out = bin()
            .args([
                "select",
                "--data",
                data.to_str().unwrap(),
                "--family",
                "logit",
                "--structures",
                "ind,exch,ar1",
                "--no-intercept",
                "--seed",
                "7",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(String::from_utf8(out.stdout).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].contains("winner"));
}

#[test]
fn subset_selection_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = demo_csv(dir.path());
    let out = bin()
        .args([
            "select",
            "--data",
            data.to_str().unwrap(),
            "--family",
            "logit",
            "--subsets",
            "t=treat|tt=treat,time",
            "--structure",
            "exch",
            "--no-intercept",
            "--covariates",
            "x1,treat,time",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
}

#[test]
fn simulate_builtin_design_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("s1");
    let out2 = dir.path().join("s2");
    for out in [&out1, &out2] {
        let status = bin()
            .args([
                "simulate",
                "--design",
                "table3-ex",
                "--n",
                "25",
                "--b",
                "5",
                "--seed",
                "3",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read_to_string(out1.with_extension("jsonl")).unwrap();
    let b = std::fs::read_to_string(out2.with_extension("jsonl")).unwrap();
    assert_eq!(a, b);
    // Tallies sum to B.
    let table: serde_json::Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    let sum: u64 = table["aic_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum::<u64>()
        + table["failures"].as_u64().unwrap();
    assert_eq!(sum, 5);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    // Missing file: configuration class (2).
    let missing = bin()
        .args([
            "fit",
            "--data",
            "/nonexistent/nope.csv",
            "--family",
            "logit",
        ])
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(2));

    // Bad family name: 2.
    let dir = tempfile::tempdir().unwrap();
    let data = demo_csv(dir.path());
    let bad_family = bin()
        .args(["fit", "--data", data.to_str().unwrap(), "--family", "gamma"])
        .status()
        .unwrap();
    assert_eq!(bad_family.code(), Some(2));

    // Invalid replicate count: 2.
    let bad_b = bin()
        .args(["simulate", "--design", "table3-ex", "--b", "0"])
        .status()
        .unwrap();
    assert_eq!(bad_b.code(), Some(2));

    // Unknown design: 2.
    let bad_design = bin()
        .args(["simulate", "--design", "table7-xy"])
        .status()
        .unwrap();
    assert_eq!(bad_design.code(), Some(2));

    // Numerical failure: rank-deficient design (duplicated column) exits 3.
    let dup = dir.path().join("dup.csv");
    let mut text = String::from("cluster,occasion,y,a,b\n");
    for i in 0..20 {
        let y = u64::from(i < 17);
        text.push_str(&format!("c{i},1,{y},1.0,1.0\n"));
    }
    std::fs::write(&dup, text).unwrap();
    let rank = bin()
        .args([
            "fit",
            "--data",
            dup.to_str().unwrap(),
            "--family",
            "logit",
            "--no-intercept",
        ])
        .status()
        .unwrap();
    assert_eq!(rank.code(), Some(3));

    // Malformed response under Bernoulli margins: 2, and the row is named.
    let bad_y = dir.path().join("bady.csv");
    std::fs::write(&bad_y, "cluster,occasion,y\na,1,0\na,2,2\n").unwrap();
    let out = bin()
        .args(["fit", "--data", bad_y.to_str().unwrap(), "--family", "logit"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("row 3"), "stderr: {err}");
}

#[test]
fn independence_fit_matches_glm_mle_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = demo_csv(dir.path());
    let out = bin()
        .args([
            "fit",
            "--data",
            data.to_str().unwrap(),
            "--family",
            "logit",
            "--structure",
            "ind",
            "--no-intercept",
            "--out",
            dir.path().join("ind").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let jsonl =
        std::fs::read_to_string(dir.path().join("ind").with_extension("jsonl")).unwrap();
    let record: wscores::io::FitRecord = serde_json::from_str(jsonl.trim()).unwrap();
    // Weighted scores equals the stage-1 MLE under the identity weights.
    for (a, b) in record.beta.iter().zip(&record.beta_cl1) {
        assert!((a - b).abs() < 1e-8);
    }
}
