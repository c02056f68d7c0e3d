use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bubbleonet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).arg("--threads").arg("1").output().expect("spawn")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> Value {
    json!({
        "format_version": 1,
        "seed": 3,
        "doe": {
            "r0_values": [50e-6],
            "amp": {"lo": 1e5, "hi": 2e5, "count": 2},
            "freq": {"lo": 3e5, "hi": 6e5, "count": 5},
            "t_max": 20e-6,
            "n_points": 100,
            "model": "RP"
        },
        "split_ratio": 0.8,
        "network": {
            "branch": [100, 12, 8],
            "trunk": [1, 12, 8],
            "branch_activation": "rowdy",
            "trunk_activation": "relu",
            "rowdy_terms": 3
        },
        "train": {
            "lr": 1e-3,
            "batch_size": 4,
            "epochs": 6,
            "weights": {"w_data": 1.0, "w_ode": 100.0, "w_ic": 0.0},
            "seed": 5
        },
        "study": {
            "r0_values": [50e-6],
            "amp": {"lo": 1.5e5, "hi": 3e5, "count": 2},
            "freq": {"lo": 4e5, "hi": 7e5, "count": 2},
            "t_max": 20e-6,
            "n_points": 100,
            "model": "RP"
        },
        "paths": {
            "dataset": dir.join("data"),
            "model": dir.join("model"),
            "report": dir.join("report"),
            "study_dataset": dir.join("study")
        }
    })
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, serde_json::to_string_pretty(&tiny_config(&root)).unwrap()).unwrap();
        Self {
            _tmp: tmp,
            root,
            config,
        }
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn generate(&self) {
        ok(&["generate", "--config", self.cfg()]);
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn bad_config_exits_with_validation_code() {
    let f = Fixture::new();
    let out = run(&["generate", "--config", f.cfg(), "--set", "train.lr=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));

    let out = run(&["generate", "--config", f.cfg(), "--set", "network.branch=[50,8]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("network.branch"));
}

#[test]
fn missing_files_exit_with_io_code() {
    let f = Fixture::new();
    let out = run(&["generate", "--config", f.path("nope.json").to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    let out = run(&["train", "--config", f.cfg(), "--quiet"]);
    assert!(!out.status.success());
    assert!(matches!(out.status.code(), Some(2) | Some(3)), "{:?}", out.status);
}

#[test]
fn generate_is_deterministic() {
    let f = Fixture::new();
    f.generate();
    let first = read(&f.path("data/manifest.json"));
    let blobs: Vec<_> = std::fs::read_dir(f.path("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.json")
        .collect();
    let before: Vec<_> = blobs.iter().map(|p| read(p)).collect();
    f.generate();
    assert_eq!(read(&f.path("data/manifest.json")), first);
    for (p, b) in blobs.iter().zip(before) {
        assert_eq!(read(p), b, "{}", p.display());
    }
    let meta: Value = serde_json::from_slice(&read(&f.path("data/run.json"))).unwrap();
    assert_eq!(meta["result"]["samples"], 10);
    assert_eq!(meta["result"]["train"], 8);
    assert_eq!(meta["result"]["validation"], 2);
    assert_eq!(meta["threads"], 1);
    assert!(meta["config_hash"].as_str().unwrap().len() == 8);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let f = Fixture::new();
    f.generate();
    ok(&["train", "--config", f.cfg(), "--epochs", "0", "--quiet"]);
    assert!(f.path("model/final").exists());
    let hist = std::fs::read_to_string(f.path("model/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1, "{hist}");
}

#[test]
fn train_is_reproducible_and_writes_metadata() {
    let f = Fixture::new();
    f.generate();
    ok(&["train", "--config", f.cfg(), "--quiet"]);
    let h1 = read(&f.path("model/history.csv"));
    let c1 = read(&f.path("model/final/model.bin"));
    ok(&["train", "--config", f.cfg(), "--quiet"]);
    assert_eq!(read(&f.path("model/history.csv")), h1);
    assert_eq!(read(&f.path("model/final/model.bin")), c1);
    let hist = String::from_utf8(h1).unwrap();
    assert_eq!(hist.lines().count(), 7);
    for d in ["last", "best", "final"] {
        assert!(f.path("model").join(d).is_dir(), "{d}");
    }
    let meta: Value = serde_json::from_slice(&read(&f.path("model/run.json"))).unwrap();
    assert_eq!(meta["command"], "train");
    assert!(meta["wall_clock_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn kfold_reports_every_fold() {
    let f = Fixture::new();
    f.generate();
    let out = ok(&["train", "--config", f.cfg(), "--kfold", "4", "--epochs", "2", "--quiet"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("fold ")).count(), 4, "{text}");
    let meta: Value = serde_json::from_slice(&read(&f.path("model/run.json"))).unwrap();
    assert_eq!(meta["result"]["folds"].as_array().unwrap().len(), 4);
    assert!(f.path("model/best").is_dir());
}

#[test]
fn two_step_reports_basis_diagnostics() {
    let f = Fixture::new();
    f.generate();
    let rowdy = "network.trunk_activation=\"rowdy\"";
    let out = ok(&["train2", "--config", f.cfg(), "--epochs", "3", "--quiet", "--set", rowdy]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("|UtU-I|inf"));
    let meta: Value = serde_json::from_slice(&read(&f.path("model/run.json"))).unwrap();
    assert!(meta["result"]["orthonormality_defect"].as_f64().unwrap() < 1e-8);
    assert!(meta["result"]["reconstruction_error"].as_f64().unwrap() < 1e-10);
    let out = run(&["train", "--config", f.cfg(), "--mode", "two-step", "--kfold", "3", "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_with_oracle_gives_zero_error() {
    let f = Fixture::new();
    ok(&["generate", "--config", f.cfg(), "--study"]);
    ok(&["eval", "--config", f.cfg(), "--oracle"]);
    let mut rdr = csv::Reader::from_path(f.path("report/report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let mse = headers.iter().position(|h| h == "mse").unwrap();
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[mse].parse::<f64>().unwrap(), 0.0);
    }
    assert!(f.path("report/summary.json").exists());
    assert!(f.path("report/spectrum_000.csv").exists());
    assert!(f.path("report/plotdata_003.csv").exists());
}

#[test]
fn eval_with_model_flags_out_of_range_cases() {
    let f = Fixture::new();
    f.generate();
    ok(&["generate", "--config", f.cfg(), "--study"]);
    ok(&["train", "--config", f.cfg(), "--epochs", "2", "--quiet"]);
    ok(&["eval", "--config", f.cfg()]);
    let mut rdr = csv::Reader::from_path(f.path("report/report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "in_distribution").unwrap();
    let flags: Vec<String> = rdr.records().map(|r| r.unwrap()[col].to_string()).collect();
    // amplitudes 1.5e5 (inside) and 3e5 (outside); frequency 7e5 is outside
    assert_eq!(flags, ["true", "false", "false", "false"]);
}

/// Pressure CSV (t, P in SI) for one stored sample.
fn pressure_csv(f: &Fixture, id: usize) -> PathBuf {
    let ds = bubbleonet::datagen::read_dataset(&f.path("data")).unwrap();
    let s = ds.load(id).unwrap();
    let sc = s.meta.scales;
    let path = f.path(&format!("pressure_{id}.csv"));
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["t", "P"]).unwrap();
    for (&t, &p) in s.pressure.t_grid.iter().zip(&s.pressure.p_bar) {
        w.write_record([sc.time_to_si(t).to_string(), sc.pressure_to_si(p).to_string()])
            .unwrap();
    }
    w.flush().unwrap();
    path
}

#[test]
fn infer_is_deterministic_and_matches_library() {
    let f = Fixture::new();
    f.generate();
    ok(&["train", "--config", f.cfg(), "--epochs", "2", "--quiet"]);
    let input = pressure_csv(&f, 0);
    let ckpt = f.path("model/final");
    let a = f.path("a.csv");
    let b = f.path("b.csv");
    for out in [&a, &b] {
        ok(&[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--pressure",
            input.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(read(&a), read(&b));

    // same SI -> non-dimensional path as the command, then the library
    let params = bubbleonet::nn::load_checkpoint(&ckpt).unwrap().params;
    let sc = bubbleonet::physics::make_scales(50e-6, 20e-6, &Default::default()).unwrap();
    let mut rdr = csv::Reader::from_path(&input).unwrap();
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for r in rdr.records() {
        let r = r.unwrap();
        t.push(sc.time_from_si(r[0].parse().unwrap()));
        p.push(sc.pressure_from_si(r[1].parse().unwrap()));
    }
    let model = bubbleonet::spectral::ModelPredictor {
        params,
        r0_ref: 50e-6,
    };
    let expect = model.predict_profile(&p, &t, 50e-6).unwrap();
    let mut rdr = csv::Reader::from_path(&a).unwrap();
    let got: Vec<f64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(got.len(), 100);
    for (g, e) in got.iter().zip(expect.iter()) {
        assert_eq!(g.to_bits(), e.to_bits());
    }
}

#[test]
fn infer_rejects_wrong_width() {
    let f = Fixture::new();
    f.generate();
    ok(&["train", "--config", f.cfg(), "--epochs", "0", "--quiet"]);
    let path = f.path("short.csv");
    let mut text = String::from("t,P\n");
    for i in 0..50 {
        text.push_str(&format!("{},{}\n", i as f64 * 1e-7, 101325.0));
    }
    std::fs::write(&path, text).unwrap();
    let out = run(&[
        "infer",
        "--checkpoint",
        f.path("model/final").to_str().unwrap(),
        "--pressure",
        path.to_str().unwrap(),
        "--output",
        f.path("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resample"));
}

#[test]
fn spectrum_finds_a_bin_aligned_tone() {
    let f = Fixture::new();
    let path = f.path("tone.csv");
    let n = 2000;
    let dt = 55e-6 / n as f64;
    let mut text = String::from("t,x\n");
    for i in 0..n {
        let t = i as f64 * dt;
        text.push_str(&format!("{t},{}\n", (2.0 * std::f64::consts::PI * 1e6 * t).sin()));
    }
    std::fs::write(&path, text).unwrap();
    let out_csv = f.path("spec.csv");
    let out = ok(&[
        "spectrum",
        "--input",
        path.to_str().unwrap(),
        "--hint",
        "1e6",
        "--output",
        out_csv.to_str().unwrap(),
    ]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["driving_peak"]["bin"], 55);
    let rows = std::fs::read_to_string(&out_csv).unwrap().lines().count();
    assert_eq!(rows, 1 + n / 2 + 1);
}

#[test]
fn spectrum_of_a_dataset_sample() {
    let f = Fixture::new();
    f.generate();
    let out = ok(&[
        "spectrum",
        "--dataset",
        f.path("data").to_str().unwrap(),
        "--sample",
        "0",
        "--output",
        f.path("s.csv").to_str().unwrap(),
    ]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["resolution"].as_f64().unwrap() > 0.0);
    let out = run(&["spectrum", "--output", f.path("x.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            bubbleonet::config::RunConfig::load(&p, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 6);
}
