use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prunelab_harness::output::{read_cells, write_aggregates};
use prunelab_harness::sweep::aggregate;

fn prunelab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunelab")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The fig3a preset shrunk so a ten-point grid runs in well under a second.
fn small_config(dir: &Path) -> String {
    let text = stdout(&prunelab(&["preset", "fig3a"], dir));
    let small = text
        .replace("dim = 400", "dim = 30")
        .replace("width = 150", "width = 8")
        .replace("n_train = 100", "n_train = 20")
        .replace("n_eval = 100", "n_eval = 20")
        .replace("t_max = 1000", "t_max = 40");
    let path = dir.join("small.cfg");
    fs::write(&path, small).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn preset_prints_the_small_scale_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let o = prunelab(&["preset", "fig3a"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for line in [
        "classes = 2",
        "dim = 400",
        "width = 150",
        "n_train = 100",
        "sigma0 = 0.1",
        "eta = 0.001",
        "t_max = 1000",
        "activation = relu",
        "sigma_n = 0.5",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }
    assert!(text.contains("pruned fractions"));
}

#[test]
fn sweep_grid_from_range_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = prunelab(&["sweep", "--config", &cfg, "--p", "0.0:0.9:0.1", "--seeds", "0,1", "--out", "g"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cells = read_cells(fs::File::open(dir.path().join("g/cells.csv")).unwrap()).unwrap();
    assert_eq!(cells.len(), 20);
    let aggs = fs::read_to_string(dir.path().join("g/aggregates.csv")).unwrap();
    assert_eq!(aggs.lines().count(), 11);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["cells"], 20);
    assert!(meta["conversion_note"].as_str().unwrap().contains("retention"));
    assert_eq!(meta["condition_set"]["passed"], "informational");
}

#[test]
fn repeated_sweeps_are_byte_identical_and_aggregates_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for (out, threads) in [("a", "1"), ("b", "3")] {
        let o = prunelab(
            &["sweep", "--config", &cfg, "--p", "0.4,1.0", "--seeds", "0:3", "--no-timing", "--threads", threads, "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["cells.csv", "aggregates.csv", "metadata.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let cells = read_cells(fs::File::open(dir.path().join("a/cells.csv")).unwrap()).unwrap();
    let mut again = Vec::new();
    write_aggregates(&mut again, &aggregate(&cells)).unwrap();
    assert_eq!(again, fs::read(dir.path().join("a/aggregates.csv")).unwrap());
}

#[test]
fn run_then_diag_on_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = prunelab(&["run", "--config", &cfg, "--seed", "3", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("termination=t_max_reached"));
    for f in ["trace.csv", "mask.bin", "checkpoint.bin", "cell.csv"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }
    let o = prunelab(
        &["diag", "--check", "grad", "--checkpoint", "r/checkpoint.bin", "--mask", "r/mask.bin", "--config", &cfg, "--seed", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(rec["check_id"], "grad_bound");
    for key in ["passed", "measured", "bound", "slack"] {
        assert!(rec.get(key).is_some(), "{key}");
    }

    let o = prunelab(
        &["diag", "--check", "all", "--checkpoint", "r/checkpoint.bin", "--mask", "r/mask.bin", "--config", &cfg, "--n-mc", "1000"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 7);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| prunelab(args, dir.path()).status.code();
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["sweep", "--preset", "fig3a", "--bogus"]), Some(2));
    assert_eq!(code(&["preset", "fig9"]), Some(2));
    assert_eq!(code(&["sweep", "--preset", "fig3a", "--p", "1:0:0.1"]), Some(2));
    fs::write(dir.path().join("typo.cfg"), "[train]\netaa = 1\n").unwrap();
    let o = prunelab(&["run", "--config", "typo.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("etaa"));
    assert_eq!(code(&["run", "--config", "missing.cfg"]), Some(1));
    let o = prunelab(&["diag", "--check", "grad", "--checkpoint", "typo.cfg", "--mask", "typo.cfg", "--preset", "fig3a"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
