use std::process::Command;

fn mtdgrid(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mtdgrid")).current_dir(dir).args(args).output().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdgrid(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(mtdgrid(dir.path(), &["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(mtdgrid(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdgrid(dir.path(), &["--config", "nowhere/c.toml", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/c.toml"));
    std::fs::write(dir.path().join("bad.toml"), "[pool]\nkk = 1\n").unwrap();
    assert_eq!(mtdgrid(dir.path(), &["--config", "bad.toml", "gen-data"]).status.code(), Some(1));
}

#[test]
fn evaluate_without_attacks_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[estimator]\ncalibration_samples = 1000\n[attack]\nsamples_per_class = 40\n[detector]\nepochs = 2\n";
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let ok = |args: &[&str]| {
        let o = mtdgrid(dir.path(), args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    ok(&["--config", "c.toml", "--out", "g", "gen-data", "--attacked", "1"]);
    ok(&["--config", "c.toml", "--out", "b", "train-base", "--data", "g/dataset.csv"]);
    let data = std::fs::read_to_string(dir.path().join("g/dataset.csv")).unwrap();
    let only_clean: String = data.lines().enumerate().filter(|(i, l)| *i == 0 || l.contains(",0,clean,")).map(|(_, l)| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("clean.csv"), only_clean).unwrap();
    let out = mtdgrid(dir.path(), &["--config", "c.toml", "--out", "e", "evaluate", "--model", "b/base.model", "--data", "clean.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("positive"));
    ok(&["--config", "c.toml", "--out", "e", "evaluate", "--model", "b/base.model", "--data", "g/dataset.csv"]);
    let manifest = std::fs::read_to_string(dir.path().join("e/run_manifest.toml")).unwrap();
    assert!(manifest.contains("metrics.csv") && manifest.contains("replicate.0"));
}
