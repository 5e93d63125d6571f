use std::path::Path;
use std::process::{Command, Output};

fn kit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glmeiv-kit")).current_dir(dir).args(args).output().expect("binary runs")
}

fn data_args() -> Vec<&'static str> {
    vec![
        "--genes",
        "genes.mtx",
        "--gene-names",
        "genes.names",
        "--grnas",
        "grnas.mtx",
        "--grna-names",
        "grnas.names",
        "--covariates",
        "covariates.csv",
    ]
}

fn synth(dir: &Path) {
    let o = kit(dir, &["synthesize", "--out-dir", ".", "--cells", "2000", "--genes", "4", "--grnas", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_runs_and_reuses_the_store() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    let mut args = vec!["pipeline"];
    args.extend(data_args());
    args.extend(["--pairs", "pairs.csv", "--config", "run.cfg", "--out", "results.csv", "--workers", "2"]);
    let o = kit(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("6 fitted"));
    let text = std::fs::read_to_string(t.path().join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "gene_id,grna_id,method,estimate,fold_change,se,ci_lo,ci_hi,p_value,converged,flags,n_glm_fits,ms_elapsed"
    );
    assert_eq!(lines.count(), 8);
    let o = kit(t.path(), &args);
    assert!(String::from_utf8_lossy(&o.stderr).contains("0 fitted, 6 reused"));
}

#[test]
fn partial_failure_exits_with_two() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    std::fs::write(t.path().join("bad.csv"), "gene_id,grna_id\ngene0,grna0\nmissing,grna0\n").unwrap();
    let mut args = vec!["pipeline"];
    args.extend(data_args());
    args.extend(["--pairs", "bad.csv", "--out", "r.csv"]);
    let o = kit(t.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    let text = std::fs::read_to_string(t.path().join("r.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("missing,grna0") && l.contains("error")));
}

#[test]
fn fit_pair_prints_diagnostics() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    let mut args = vec!["fit-pair"];
    args.extend(data_args());
    args.extend(["--gene", "gene0", "--grna", "grna0"]);
    let o = kit(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("gene effect") && out.contains("log-likelihood trace"));
}

#[test]
fn threshold_theory_grid() {
    let t = tempfile::tempdir().unwrap();
    let o = kit(t.path(), &["threshold-theory", "--beta1-g", "1,2", "--pi", "0.5", "--c-steps", "5"]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "beta1_g,pi,c,beta0_g,gamma,b,l,avar");
    assert_eq!(lines.count(), 10);
}

#[test]
fn assign_writes_per_cell_rows() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    let o = kit(
        t.path(),
        &["assign", "--grnas", "grnas.mtx", "--grna-names", "grnas.names", "--covariates", "covariates.csv", "--grna", "grna1", "--out", "a.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(t.path().join("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 2001);
    assert!(text.lines().nth(1).unwrap().starts_with("0,grna1,"));
}

#[test]
fn simulate_writes_metrics() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("s.cfg"),
        "n = 2000\npi = 0.1\ngrna_fold = 20\nn_sim = 2\nmethods = accelerated, thresholding_bayes\n",
    )
    .unwrap();
    let o = kit(t.path(), &["simulate", "--scenario", "s.cfg", "--out", "m.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(t.path().join("m.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("glmeiv_accelerated,grna_fold=20,2,"));
}

#[test]
fn bad_config_is_reported() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    std::fs::write(t.path().join("bad.cfg"), "mode = sideways\n").unwrap();
    let mut args = vec!["pipeline"];
    args.extend(data_args());
    args.extend(["--pairs", "pairs.csv", "--config", "bad.cfg", "--out", "r.csv"]);
    let o = kit(t.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown mode"));
}
