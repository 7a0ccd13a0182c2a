use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use megp::harness::experiment::sha256_hex;
use serde_json::Value;

fn megp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_megp"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.in.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
methods = ["MT-VAR"]
sweep = [6]
reps = 2
seed = 11

[data]
generator = "synthetic"
tasks = 24
points_per_task = 5
test_points = 12
lo = -4.0
hi = 4.0

[model]
restarts = 1
em_cap = 5
mstep_cap = 10
warm_start_tasks = 0
"#;

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&megp(&[])), 1);
    assert_eq!(code(&megp(&["frobnicate"])), 1);
    assert_eq!(code(&megp(&["fit", "--method", "kriging"])), 1);
    assert_eq!(code(&megp(&["fit", "--m", "3,4"])), 1);
    assert_eq!(code(&megp(&["sweep", "--m", "5,5"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "reps = \"many\"\n");
    assert_eq!(code(&megp(&["sweep", "--config", &bad])), 1);
    let unknown = config(dir.path(), "wibble = 3\n");
    assert_eq!(code(&megp(&["fit", "--config", &unknown])), 1);
}

#[test]
fn help_and_version_exit_zero() {
    let o = megp(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep"));
    assert_eq!(code(&megp(&["--version"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = megp(&[
        "eval",
        "--model",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("io"));

    let garbage = dir.path().join("model.json");
    fs::write(&garbage, "{\"schema\": \"other\", \"version\": 1}").unwrap();
    let o = megp(&[
        "predict",
        "--model",
        garbage.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fit_is_deterministic_and_manifest_hashes_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = megp(&["fit", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["model.json", "bound_trace.csv", "metrics.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    // the config echo records the output directory, nothing else may differ
    let echo = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("config.toml"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out = "))
            .map(str::to_owned)
            .collect()
    };
    assert_eq!(echo(&a), echo(&b));

    let manifest = json(&a.join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        let bytes = fs::read(a.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    assert_eq!(manifest["timings"].as_array().unwrap().len(), 1);

    // a different seed gives a different model
    let c = dir.path().join("c");
    assert_eq!(
        code(&megp(&[
            "fit",
            "--config",
            &cfg,
            "--seed",
            "12",
            "--out",
            c.to_str().unwrap()
        ])),
        0
    );
    assert_ne!(
        fs::read(a.join("model.json")).unwrap(),
        fs::read(c.join("model.json")).unwrap()
    );
}

#[test]
fn exact_and_variational_agree_with_every_input_inducing() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.to_string()
        + "inducing_init = \"all_inputs\"\nlearn_inducing = false\noptimize_hyper = false\n";
    let cfg = config(dir.path(), &body);
    let data_dir = dir.path().join("data");
    assert_eq!(
        code(&megp(&[
            "gen-synthetic",
            "--config",
            &cfg,
            "--out",
            data_dir.to_str().unwrap()
        ])),
        0
    );
    let data = data_dir.join("dataset.csv");

    let mut scores = Vec::new();
    for method in ["Direct", "MT-VAR"] {
        let fit_dir = dir.path().join(format!("fit-{method}"));
        let o = megp(&[
            "fit",
            "--config",
            &cfg,
            "--method",
            method,
            "--out",
            fit_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let eval_dir = dir.path().join(format!("eval-{method}"));
        let o = megp(&[
            "eval",
            "--model",
            fit_dir.join("model.json").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let m = json(&eval_dir.join("metrics.json"));
        assert_eq!(m["count"].as_u64().unwrap(), 24);
        scores.push((
            m["mean_smse"].as_f64().unwrap(),
            m["mean_msll"].as_f64().unwrap(),
        ));
    }
    let (d, v) = (scores[0], scores[1]);
    assert!(
        (d.0 - v.0).abs() <= 1e-6 * d.0.abs(),
        "smse {} vs {}",
        d.0,
        v.0
    );
    assert!(
        (d.1 - v.1).abs() <= 1e-6 * d.1.abs().max(1.0),
        "msll {} vs {}",
        d.1,
        v.1
    );

    // predictions on the dataset grid
    let pred_dir = dir.path().join("pred");
    let o = megp(&[
        "predict",
        "--model",
        dir.path().join("fit-MT-VAR/model.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(pred_dir.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "task,point,x0,mean,var");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 24 * 12);
    assert!(rows.iter().all(|r| r[4] > 0.0 && r[3].is_finite()));
}

#[test]
fn sweep_writes_one_row_per_method_and_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("sweep");
    let o = megp(&[
        "sweep",
        "--config",
        &cfg,
        "--method",
        "MT-VAR,MT-SD",
        "--m",
        "4,8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,m,n,smse_mean,smse_sd,msll_mean,msll_sd"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[2], "2", "two repetitions per cell");
    }

    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2 * 2);
    assert!(results.lines().skip(1).all(|l| l.contains(",ok,")));

    let manifest = json(&out.join("manifest.json"));
    let names: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    for n in [
        "config.toml",
        "results.csv",
        "metrics.csv",
        "bound_trace.csv",
        "sweep.csv",
    ] {
        assert!(names.contains(&n), "{n} missing from manifest");
    }
    for f in manifest["files"].as_array().unwrap() {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
}
