use std::path::Path;
use std::process::{Command, Output};

use cmi_core::io::{matrix_to_csv, parse_csv, parse_test_record};
use cmi_core::simdata::{gen_example, Example, Scenario};
use ndarray::Array2;

fn cmi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmi"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("cmi runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cmi(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn generate(dir: &Path, scenario: &str, n: usize, seed: u64, out: &str) {
    ok(
        dir,
        &["generate", "--example", "a1", "--scenario", scenario, "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", out],
    );
}

fn test_on(dir: &Path, data: &str, extra: &[&str], out: &str) -> cmi_core::TestResult {
    let (x, y, z) = (format!("{data}/x.csv"), format!("{data}/y.csv"), format!("{data}/z.csv"));
    let mut args = vec!["test", "--x", &x, "--y", &y, "--z", &z, "--out", out];
    args.extend_from_slice(extra);
    ok(dir, &args);
    parse_test_record(&read(&dir.join(out), "result.json")).unwrap().result
}

#[test]
fn exported_null_data_mostly_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut accepted = 0;
    for seed in 0..20u64 {
        let data = format!("data{seed}");
        generate(dir, "null", 200, seed, &data);
        let res = test_on(dir, &data, &[], &format!("run{seed}"));
        println!("seed {seed}: p = {}", res.p_value);
        accepted += usize::from(res.p_value > 0.05);
    }
    assert!(accepted >= 18, "{accepted}/20 accepted");
}

#[test]
fn constant_response_gives_zero_statistic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir, "null", 80, 1, "data");
    let y = Array2::from_elem((80, 1), 2.5);
    std::fs::write(dir.join("data/y.csv"), matrix_to_csv(y.view(), None)).unwrap();
    let res = test_on(dir, "data", &["--bootstrap", "50"], "run");
    assert_eq!(res.t_hat, 0.0);
    assert_eq!(res.p_value, 1.0);
    assert!(!res.reject);
}

#[test]
fn row_mismatch_names_both_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir, "null", 50, 1, "a");
    generate(dir, "null", 40, 1, "b");
    let out = cmi(dir, &["test", "--x", "a/x.csv", "--y", "b/y.csv", "--z", "a/z.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("a/x.csv") && msg.contains("b/y.csv"), "{msg}");
}

#[test]
fn invalid_options_exit_with_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = cmi(dir, &["generate", "--example", "a9", "--scenario", "null", "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cmi(dir, &["simulate", "--example", "a1", "--scenario", "bogus", "--n", "10", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cmi(dir, &["test", "--x", "nope.csv", "--y", "nope.csv", "--z", "nope.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.csv"));
}

#[test]
fn ragged_csv_reports_position() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir, "null", 30, 1, "data");
    std::fs::write(dir.join("data/y.csv"), "y1\n1.0\n2.0,3.0\n").unwrap();
    let out = cmi(dir, &["test", "--x", "data/x.csv", "--y", "data/y.csv", "--z", "data/z.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn single_replication_study() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--example", "a2", "--scenario", "null", "--n", "60", "--reps", "1", "--out", "sim"]);
    let report = cmi_core::io::parse_study_report(&read(&dir.join("sim"), "study_a2_null_estimated_n60.json")).unwrap();
    assert_eq!(report.completed + report.failed, 1);
}

#[test]
fn repeated_test_runs_match() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir, "dense", 100, 4, "data");
    test_on(dir, "data", &["--seed", "7"], "one");
    test_on(dir, "data", &["--seed", "7"], "two");
    assert_eq!(read(&dir.join("one"), "result.json"), read(&dir.join("two"), "result.json"));
}

#[test]
fn report_merges_and_adjusts_power() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let common = ["--example", "a1", "--n", "100", "--reps", "4", "--variant", "oracle", "--bootstrap", "100"];
    let sim = |scenario: &str, out: &str| {
        let mut args = vec!["simulate", "--scenario", scenario, "--out", out];
        args.extend_from_slice(&common);
        ok(dir, &args);
    };
    sim("null", "null");
    sim("dense", "dense");
    let null_file = "null/study_a1_null_oracle_n100.json";
    let dense_file = "dense/study_a1_dense_oracle_n100.json";

    ok(dir, &["report", null_file, dense_file, null_file, "--out", "both"]);
    let table = read(&dir.join("both"), "table.csv");
    assert_eq!(table.lines().count(), 3, "{table}");
    let dense_row = table.lines().find(|l| l.contains(",dense,")).unwrap();
    assert!(!dense_row.ends_with(",NA"), "{dense_row}");
    assert!(read(&dir.join("both"), "plot.csv").starts_with("series,n,rejection_rate,lower,upper\n"));

    ok(dir, &["report", dense_file, "--out", "alone"]);
    let table = read(&dir.join("alone"), "table.csv");
    assert!(table.lines().nth(1).unwrap().ends_with(",NA"), "{table}");

    let mut args = vec!["simulate", "--scenario", "null", "--out", "other", "--seed", "99"];
    args.extend_from_slice(&common);
    ok(dir, &args);
    let out = cmi(dir, &["report", null_file, "other/study_a1_null_oracle_n100.json", "--out", "clash"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("incompatible"), "{}", stderr(&out));
}

#[test]
fn exported_csv_matches_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir, "sparse", 64, 12, "data");
    let data = gen_example(Example::A1, Scenario::Sparse, 64, 12).unwrap();
    for (name, m) in [("x", &data.x), ("y", &data.y), ("z", &data.z)] {
        let parsed = parse_csv(&read(&dir.join("data"), &format!("{name}.csv"))).unwrap();
        assert_eq!(parsed.header.as_ref().unwrap()[0], format!("{name}1"));
        assert_eq!(parsed.values.dim(), m.dim());
        let worst = (&parsed.values - m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst <= 1e-12, "{name}: {worst}");
    }
}
