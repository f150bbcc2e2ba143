//! End-to-end tests of the command-line interface, run against the built
//! binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{consistent_two_var_dn, dataset_from_mn, random_mn};
use dnmn::io::{load_mn, save_dataset, save_dn, save_mn};
use dnmn::model::{MarkovNetwork, Schema};

fn dnmn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnmn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn pipeline_conversion_then_enumeration_reproduces_joint() {
    let dir = tempfile::tempdir().unwrap();
    let dn_path = dir.path().join("example.dn");
    save_dn(&dn_path, &consistent_two_var_dn()).unwrap();

    let out = dnmn(
        &[
            "dn2mn",
            "-m",
            "example.dn",
            "--base",
            "single",
            "--xprime",
            "1,1",
            "--order",
            "single",
            "-o",
            "example.mn",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("example.mn.manifest.json").exists());

    let out = dnmn(&["enumerate", "-m", "example.mn"], dir.path());
    assert!(out.status.success());
    let expect = [("0,0", 0.3), ("0,1", 0.1), ("1,0", 0.2), ("1,1", 0.4)];
    let text = stdout_str(&out);
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    assert_eq!(lines.len(), 4);
    for (line, (assignment, prob)) in lines.iter().zip(expect) {
        let (a, p) = line.split_once('\t').unwrap();
        assert_eq!(a, assignment);
        let p: f64 = p.parse().unwrap();
        assert!((p - prob).abs() < 1e-12, "{p} vs {prob}");
    }
}

#[test]
fn eval_npll_of_empty_model_prints_log_half() {
    let dir = tempfile::tempdir().unwrap();
    let mn_path = dir.path().join("empty.mn");
    save_mn(&mn_path, &MarkovNetwork::empty(Schema::binary(3).unwrap())).unwrap();
    std::fs::write(dir.path().join("test.csv"), "0,1,0\n1,1,1\n0,0,0\n").unwrap();

    let out = dnmn(
        &[
            "eval", "--metric", "npll", "-m", "empty.mn", "-i", "test.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout_str(&out);
    let (label, value) = text.trim().split_once('\t').unwrap();
    assert_eq!(label, "npll");
    let value: f64 = value.parse().unwrap();
    assert!((value - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn full_learning_pipeline_smoke() {
    // dnlearn -> dn2mn (rot2 + marginal) -> mnlearnw; eval runs on both
    // converted and weight-learned outputs.
    let dir = tempfile::tempdir().unwrap();
    let truth = random_mn(5150, 4, 8);
    save_dataset(
        &dir.path().join("train.csv"),
        &dataset_from_mn(&truth, 400, 1),
    )
    .unwrap();
    save_dataset(
        &dir.path().join("tune.csv"),
        &dataset_from_mn(&truth, 100, 2),
    )
    .unwrap();
    save_dataset(
        &dir.path().join("test.csv"),
        &dataset_from_mn(&truth, 100, 3),
    )
    .unwrap();

    let out = dnmn(
        &[
            "dnlearn",
            "--cpd",
            "tree",
            "-i",
            "train.csv",
            "-t",
            "tune.csv",
            "-o",
            "model.dn",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "dnlearn: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = dnmn(
        &[
            "dn2mn",
            "-m",
            "model.dn",
            "-i",
            "train.csv",
            "--base",
            "marginal",
            "--order",
            "rot2",
            "-o",
            "converted.mn",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "dn2mn: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = dnmn(
        &[
            "mnlearnw",
            "-m",
            "model.dn",
            "-i",
            "train.csv",
            "-t",
            "tune.csv",
            "-o",
            "learned.mn",
            "--max-iter",
            "30",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "mnlearnw: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    for model in ["converted.mn", "learned.mn"] {
        for metric in ["pll", "npll", "cmll"] {
            let out = dnmn(
                &[
                    "eval",
                    "--metric",
                    metric,
                    "-m",
                    model,
                    "-i",
                    "test.csv",
                    "--samples",
                    "200",
                    "--burn-in",
                    "20",
                ],
                dir.path(),
            );
            assert!(
                out.status.success(),
                "eval {metric} on {model}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            let text = stdout_str(&out);
            let (_, value) = text.trim().split_once('\t').unwrap();
            let value: f64 = value.parse().unwrap();
            assert!(
                value < 0.0,
                "log-likelihood metrics are negative, got {value}"
            );
        }
    }
}

#[test]
fn lr_learning_and_warm_start() {
    let dir = tempfile::tempdir().unwrap();
    let truth = random_mn(6001, 4, 7);
    save_dataset(
        &dir.path().join("train.csv"),
        &dataset_from_mn(&truth, 300, 4),
    )
    .unwrap();
    save_dataset(
        &dir.path().join("tune.csv"),
        &dataset_from_mn(&truth, 100, 5),
    )
    .unwrap();

    let out = dnmn(
        &[
            "dnlearn",
            "--cpd",
            "lr",
            "--l1",
            "0.5,2,10",
            "-i",
            "train.csv",
            "-t",
            "tune.csv",
            "-o",
            "model.dn",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "dnlearn lr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = dnmn(
        &[
            "dn2mn",
            "-m",
            "model.dn",
            "-i",
            "train.csv",
            "-o",
            "converted.mn",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "dn2mn: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Warm start from the converted model's own weights.
    let out = dnmn(
        &[
            "mnlearnw",
            "-m",
            "converted.mn",
            "-i",
            "train.csv",
            "--sigma",
            "0.5",
            "--init-from-model",
            "-o",
            "warm.mn",
            "--max-iter",
            "20",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "warm start: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(load_mn(&dir.path().join("warm.mn")).is_ok());

    // Warm start is rejected for DN feature sources.
    let out = dnmn(
        &[
            "mnlearnw",
            "-m",
            "model.dn",
            "-i",
            "train.csv",
            "--sigma",
            "0.5",
            "--init-from-model",
            "-o",
            "bad.mn",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("bad.mn").exists());
}

#[test]
fn failures_exit_nonzero_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    save_dn(&dir.path().join("model.dn"), &consistent_two_var_dn()).unwrap();

    // --base marginal without training data.
    let out = dnmn(&["dn2mn", "-m", "model.dn", "-o", "out.mn"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out.mn").exists());
    assert!(!dir.path().join("out.mn.manifest.json").exists());

    // Corrupt dataset: parse error names the line.
    std::fs::write(dir.path().join("bad.csv"), "0,1\n0\n").unwrap();
    let out = dnmn(
        &["dnlearn", "--kappa", "0.1", "-i", "bad.csv", "-o", "out.dn"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:2"));
    assert!(!dir.path().join("out.dn").exists());

    // enumerate rejects DN inputs.
    let out = dnmn(&["enumerate", "-m", "model.dn"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    // Usage errors exit 2.
    let out = dnmn(&["dn2mn", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_supports_dependency_networks_directly() {
    let dir = tempfile::tempdir().unwrap();
    save_dn(&dir.path().join("model.dn"), &consistent_two_var_dn()).unwrap();
    std::fs::write(dir.path().join("test.csv"), "1,1\n").unwrap();

    let out = dnmn(
        &[
            "eval", "--metric", "pll", "-m", "model.dn", "-i", "test.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout_str(&out);
    let (_, value) = text.trim().split_once('\t').unwrap();
    let value: f64 = value.parse().unwrap();
    let expect = 0.8f64.ln() + (2.0f64 / 3.0).ln();
    assert!((value - expect).abs() < 1e-12);

    // CMLL on a two-variable model uses the singleton-block special case and
    // therefore equals the PLL contribution exactly.
    let out = dnmn(
        &[
            "eval", "--metric", "cmll", "-m", "model.dn", "-i", "test.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout_str(&out);
    let (_, value) = text.trim().split_once('\t').unwrap();
    let value: f64 = value.parse().unwrap();
    assert!((value - expect).abs() < 1e-12);
}
