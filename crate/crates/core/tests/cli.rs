//! Runs the `geosbi` binary with small budgets and checks its files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geosbi::io::parse_key_values;
use tempfile::TempDir;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .display()
        .to_string()
}

fn geosbi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosbi"))
        .args(args)
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) {
    let out = geosbi(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn report(path: &Path) -> BTreeMap<String, String> {
    let text = fs::read_to_string(path).unwrap();
    parse_key_values(&text, "report")
        .unwrap()
        .into_iter()
        .collect()
}

fn number(r: &BTreeMap<String, String>, key: &str) -> f64 {
    r[key].parse().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every `.csv` and `.txt` output except the timing file.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            (name.ends_with(".csv") || name.ends_with(".txt")) && name != "run.txt"
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_str().unwrap().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

const SMALL_PRIOR: [&str; 6] = ["--chains", "20", "--transitions", "600", "--burn-in", "200"];

#[test]
fn toy_smoke_run_is_flagged_untrained() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("toy");
    run_ok(&[
        "toy-vmf",
        "--d",
        "1",
        "--epochs",
        "0",
        "--sample-count",
        "2000",
        "--batch-size",
        "500",
        "--chains",
        "4",
        "--transitions",
        "60",
        "--burn-in",
        "20",
        "--observations",
        "2",
        "--oracle-draws",
        "2000",
        "--grid-points",
        "16",
        "--out",
        path_str(&out),
    ]);
    let r = report(&out.join("report.txt"));
    assert_eq!(r["status"], "untrained");
    assert!(number(&r, "mmd_mean").is_finite());
    for f in [
        "model.txt",
        "samples_obs0.csv",
        "samples_obs1.csv",
        "observations.csv",
        "density_grid.csv",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn malformed_scene_names_the_line() {
    let dir = TempDir::new().unwrap();
    let scene = fixture("malformed.scene");
    let out = geosbi(&[
        "scene-prior",
        "--scene",
        &scene,
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("malformed.scene:4"), "{err}");
    assert!(err.contains("cylinder"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(
        geosbi(&["scene-prior", "--chains", "x"]).status.code(),
        Some(1)
    );
    assert_eq!(geosbi(&["launch"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(
        geosbi(&["scene-prior", "--config", path_str(&cfg)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn scene_prior_mode_sits_on_the_disk() {
    let dir = TempDir::new().unwrap();
    let scene = fixture("single_disk.scene");
    run_ok(&[
        "scene-prior",
        "--scene",
        &scene,
        "--out",
        path_str(dir.path()),
    ]);
    let r = report(&dir.path().join("report.txt"));
    for axis in ["axis0_mode", "axis1_mode"] {
        assert!(
            (number(&r, axis) - 0.5).abs() <= 0.02,
            "{axis} = {}",
            r[axis]
        );
    }
    assert_eq!(number(&r, "outside_workspace"), 0.0);
    let hist = fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
    assert!(hist.starts_with("axis,bin_center,fraction"));
    assert_eq!(hist.lines().count(), 1 + 2 * 50);
}

#[test]
fn commands_chain_through_saved_files() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let scene = fixture("single_disk.scene");
    let (train, sample, map, diag) = (
        d.join("train"),
        d.join("sample"),
        d.join("map"),
        d.join("diag"),
    );
    run_ok(&[
        "train-ratio",
        "--scene",
        &scene,
        "--sample-count",
        "4000",
        "--batch-size",
        "500",
        "--epochs",
        "2",
        "--members",
        "2",
        "--hidden",
        "8,8",
        "--out",
        path_str(&train),
    ]);
    let model = train.join("ensemble.txt");
    let r = report(&train.join("report.txt"));
    assert_eq!(r["training_pairs"], "4000");
    assert_eq!(r["members"], "2");

    // the exported training set trains the same ensemble
    let retrain = d.join("retrain");
    run_ok(&[
        "train-ratio",
        "--training",
        path_str(&train.join("training.csv")),
        "--sample-count",
        "4000",
        "--batch-size",
        "500",
        "--epochs",
        "2",
        "--members",
        "2",
        "--hidden",
        "8,8",
        "--out",
        path_str(&retrain),
    ]);
    assert_eq!(
        fs::read(&model).unwrap(),
        fs::read(retrain.join("ensemble.txt")).unwrap()
    );

    run_ok(&[
        "sample-posterior",
        "--scene",
        &scene,
        "--model",
        path_str(&model),
        "--chains",
        "4",
        "--transitions",
        "60",
        "--burn-in",
        "20",
        "--out",
        path_str(&sample),
    ]);
    let posterior = sample.join("posterior.csv");
    let header = fs::read_to_string(&posterior)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.starts_with("chain,transition"), "{header}");

    run_ok(&[
        "map",
        "--scene",
        &scene,
        "--model",
        path_str(&model),
        "--samples",
        path_str(&posterior),
        "--restarts",
        "3",
        "--out",
        path_str(&map),
    ]);
    let m = report(&map.join("map.txt"));
    let p = number(&m, "success_probability");
    assert!((0.0..=number(&m, "optimum")).contains(&p));
    assert_eq!(m["map_point"].split_whitespace().count(), 4);
    assert_eq!(
        fs::read_to_string(map.join("map_runs.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 3
    );

    run_ok(&[
        "diagnostics",
        "--samples",
        path_str(&posterior),
        "--reference",
        path_str(&posterior),
        "--manifold",
        "R2xS1",
        "--out",
        path_str(&diag),
    ]);
    let g = report(&diag.join("diagnostics.txt"));
    assert_eq!(number(&g, "mmd"), 0.0);
    assert_eq!(number(&g, "chains"), 4.0);
    assert!(number(&g, "ess_b0_0") > 0.0);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let scene = fixture("five_objects.scene");
    let (first, second) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = vec![
        "scene-prior",
        "--scene",
        &scene,
        "--seed",
        "17",
        "--out",
        path_str(&first),
    ];
    args.extend(SMALL_PRIOR);
    run_ok(&args);
    let echo = first.join("config.toml");
    run_ok(&[
        "scene-prior",
        "--config",
        path_str(&echo),
        "--out",
        path_str(&second),
    ]);
    assert_eq!(outputs(&first).len(), outputs(&second).len());
    for (name, bytes) in outputs(&first) {
        if name == "config.toml" {
            continue;
        }
        assert_eq!(outputs(&second)[&name], bytes, "{name} differs");
    }
    let other = dir.path().join("c");
    let mut args = vec![
        "scene-prior",
        "--scene",
        &scene,
        "--seed",
        "18",
        "--out",
        path_str(&other),
    ];
    args.extend(SMALL_PRIOR);
    run_ok(&args);
    assert_ne!(
        fs::read(first.join("draws.csv")).unwrap(),
        fs::read(other.join("draws.csv")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let scene = fixture("elongated.scene");
    let run = |threads: &str| {
        let out = dir.path().join(format!("t{threads}"));
        run_ok(&[
            "grasp-pipeline",
            "--scene",
            &scene,
            "--threads",
            threads,
            "--sample-count",
            "4000",
            "--batch-size",
            "500",
            "--epochs",
            "2",
            "--members",
            "3",
            "--hidden",
            "8,8",
            "--chains",
            "6",
            "--transitions",
            "60",
            "--burn-in",
            "20",
            "--restarts",
            "3",
            "--out",
            path_str(&out),
        ]);
        outputs(&out)
    };
    let one = run("1");
    let two = run("3");
    assert!(one.contains_key("posterior.csv") && one.contains_key("ensemble.txt"));
    for (name, bytes) in &one {
        if name == "config.toml" {
            continue;
        }
        assert_eq!(&two[name], bytes, "{name} differs between thread counts");
    }
}
