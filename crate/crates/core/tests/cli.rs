use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deltaprune::checkpoint::container::{load_delta, save_checkpoint};
use deltaprune::checkpoint::{ModelCheckpoint, QValue, Shape, Tensor};
use deltaprune::numkit::RngStream;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deltaprune"));
    c.env_remove("DPPX_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn deltaprune")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
        .parse()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Base of zeros and a random fine-tuned matrix `w` of the given shape.
fn matrix_pair(dir: &Path, rows: usize, cols: usize) -> (PathBuf, PathBuf) {
    let mut r = RngStream::new(11, "fixture");
    let fine: Vec<f32> = (0..rows * cols).map(|_| (r.uniform() - 0.5) as f32).collect();
    let shape = Shape::Matrix(rows, cols);
    let base = ModelCheckpoint::new("custom", vec![("w".into(), Tensor::zeros(shape))]).unwrap();
    let fine = ModelCheckpoint::new("custom", vec![("w".into(), Tensor::from_values(shape, fine).unwrap())]).unwrap();
    let (bp, fp) = (dir.join("base.dppx"), dir.join("fine.dppx"));
    save_checkpoint(&bp, &base).unwrap();
    save_checkpoint(&fp, &fine).unwrap();
    (bp, fp)
}

#[test]
fn dare_records_forced_q() {
    let dir = TempDir::new().unwrap();
    let (base, fine) = matrix_pair(dir.path(), 20, 30);
    let out = dir.path().join("p.dppx");
    ok(&["prune", "--base", s(&base), "--fine", s(&fine), "--method", "dare", "--p", "0.99", "--out", s(&out)]);
    let d = load_delta(&out).unwrap();
    assert_eq!(d.meta.q, Some(QValue::Global(1.0 - 0.99)));
    assert_eq!(d.meta.method.as_deref(), Some("dare"));
    assert!(d.meta.config["cli"].contains("\"seed\":0"));
}

#[test]
fn mp_keeps_exact_half_of_10x10() {
    let dir = TempDir::new().unwrap();
    let (base, fine) = matrix_pair(dir.path(), 10, 10);
    let out = dir.path().join("mp.dppx");
    let stdout = ok(&["prune", "--base", s(&base), "--fine", s(&fine), "--method", "mp", "--p", "0.5", "--out", s(&out)]);
    assert_eq!(field(&stdout, "nnz"), 50.0);
    assert_eq!(load_delta(&out).unwrap().nnz(), 50);
    assert_eq!(field(&stdout, "bytes"), std::fs::metadata(&out).unwrap().len() as f64);
}

#[test]
fn structured_retention_near_one_percent() {
    let dir = TempDir::new().unwrap();
    let (base, fine) = matrix_pair(dir.path(), 200, 1000);
    let out = dir.path().join("s.dppx");
    let stdout = ok(&[
        "prune", "--base", s(&base), "--fine", s(&fine), "--method", "structured", "--a", "0.05", "--b", "0.20", "--out", s(&out),
    ]);
    let retention = field(&stdout, "retention");
    assert!((0.008..=0.012).contains(&retention), "{retention}");
}

#[test]
fn usage_errors_exit_1_without_output() {
    let dir = TempDir::new().unwrap();
    let (base, fine) = matrix_pair(dir.path(), 10, 10);
    let out = dir.path().join("never.dppx");
    let o = s(&out);
    let cases: Vec<Vec<&str>> = vec![
        vec!["prune", "--base", s(&base), "--fine", s(&fine), "--delta", s(&fine), "--method", "dare", "--p", "0.9", "--out", o],
        vec!["prune", "--base", s(&base), "--method", "dare", "--p", "0.9", "--out", o],
        vec!["prune", "--base", s(&base), "--fine", s(&fine), "--method", "bogus", "--p", "0.9", "--out", o],
        vec!["prune", "--base", s(&base), "--fine", s(&fine), "--method", "dare", "--p", "0.9", "--q", "0.2", "--out", o],
        vec!["prune", "--base", s(&base), "--fine", s(&fine), "--method", "structured", "--a", "0.05", "--out", o],
        vec!["prune", "--base", s(&base), "--fine", s(&fine), "--method", "mp", "--p", "1.5", "--out", o],
        vec!["bounds", "--synthetic", "--p-grid", "0.5,1.0", "--out", o],
        vec!["bounds", "--synthetic", "--gamma", "2", "--out", o],
        vec!["bounds", "--out", o],
        vec!["prune", "--nonsense"],
    ];
    for args in cases {
        let r = run(&args);
        assert_eq!(r.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        assert!(!out.exists(), "{args:?} left an output file");
    }
}

#[test]
fn bounds_csv_shape() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b.csv");
    ok(&["bounds", "--synthetic", "--out", s(&out)]);
    let mut r = csv::Reader::from_path(&out).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["p", "chebyshev", "hoeffding", "ks", "bk"]);
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let p: f64 = rec[0].parse().unwrap();
        let hoeffding: f64 = rec[2].parse().unwrap();
        let ks: f64 = rec[3].parse().unwrap();
        assert!(ks <= hoeffding, "p={p}");
        assert_eq!(rec[4].is_empty(), p < 0.5, "p={p}");
        n += 1;
    }
    assert_eq!(n, 99);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("b.csv.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "bounds");
    assert_eq!(meta["args"]["gamma"], 0.05);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    ok(&["data", "--phase", "pretrain", "--out-dir", s(&data)]);
    let out = dir.path().join("m.dppx");
    let r = run(&["train", "--data", s(&data.join("val.dpds")), "--epochs", "2", "--lr", "1e300", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn seed_env_is_the_default_seed() {
    let dir = TempDir::new().unwrap();
    let (base, fine) = matrix_pair(dir.path(), 20, 20);
    let prune = |seed_env: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut c = bin();
        if let Some(v) = seed_env {
            c.env("DPPX_SEED", v);
        }
        let r = c
            .args(["prune", "--base", s(&base), "--fine", s(&fine), "--method", "dare", "--p", "0.5", "--out", s(&out)])
            .output()
            .unwrap();
        assert!(r.status.success());
        load_delta(&out).unwrap()
    };
    let a = prune(Some("7"), "a.dppx");
    let b = prune(None, "b.dppx");
    assert_eq!(a.meta.seed, Some(7));
    assert_eq!(b.meta.seed, Some(0));
    assert_ne!(a.tensors(), b.tensors());
}

/// Rebuilds the argument list from the `args` object of an embedded config.
fn argv_from_config(config: &serde_json::Value) -> Vec<String> {
    let mut argv = vec![config["command"].as_str().unwrap().to_string()];
    for (k, v) in config["args"].as_object().unwrap() {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => argv.push(flag),
            serde_json::Value::String(x) => argv.extend([flag, x.clone()]),
            other => argv.extend([flag, other.to_string()]),
        }
    }
    argv.extend(["--seed".to_string(), config["seed"].to_string()]);
    argv
}

#[test]
fn toy_pipeline() {
    let dir = TempDir::new().unwrap();
    let p = |name: &str| dir.path().join(name);
    ok(&["data", "--phase", "pretrain", "--out-dir", s(&p("pre"))]);
    ok(&["data", "--out-dir", s(&p("ft"))]);
    ok(&["data", "--out-dir", s(&p("cal")), "--unlabeled"]);
    ok(&["train", "--data", s(&p("pre/train.dpds")), "--epochs", "3", "--out", s(&p("base.dppx"))]);
    ok(&["--seed", "3", "train", "--base", s(&p("base.dppx")), "--data", s(&p("ft/train.dpds")), "--out", s(&p("fine.dppx"))]);
    ok(&["delta", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--out", s(&p("d.dppx"))]);

    // a single grid point yields a single-point trace and that q
    ok(&[
        "find-q", "--base", s(&p("base.dppx")), "--delta", s(&p("d.dppx")), "--p", "0.9", "--rounds", "1",
        "--data", s(&p("ft/val.dpds")), "--out", s(&p("q1.json")),
    ]);
    let q1: serde_json::Value = serde_json::from_slice(&std::fs::read(p("q1.json")).unwrap()).unwrap();
    let trace = q1["selection"]["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0]["q"], q1["selection"]["q"]);

    // output-difference search on unlabeled data moves q above 1 - p
    let find = |out: &str| {
        ok(&[
            "find-q", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--p", "0.99", "--objective", "outdiff",
            "--data", s(&p("cal/val.dpds")), "--out", s(&p(out)),
        ]);
        std::fs::read(p(out)).unwrap()
    };
    let first = find("qe.json");
    std::fs::rename(p("qe.json"), p("qe.first")).unwrap();
    assert_eq!(find("qe.json"), first);
    let qe: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(qe["selection"]["q"].as_f64().unwrap() > 0.01 + 1e-12);

    // the validation objective needs labels
    let r = run(&[
        "find-q", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--p", "0.99", "--objective", "val",
        "--data", s(&p("cal/val.dpds")), "--out", s(&p("never.json")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!p("never.json").exists());

    // per-layer search feeds a drop-and-rescale prune
    ok(&[
        "find-q", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--p", "0.9", "--per-layer", "--rounds", "5",
        "--data", s(&p("ft/val.dpds")), "--out", s(&p("ql.json")),
    ]);
    ok(&[
        "prune", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--method", "drop_rescale_q", "--p", "0.9",
        "--q-file", s(&p("ql.json")), "--out", s(&p("pq.dppx")),
    ]);
    assert!(matches!(load_delta(&p("pq.dppx")).unwrap().meta.q, Some(QValue::PerLayer(ref v)) if v.len() == 2));

    // wanda with a calibration batch
    let w = ok(&[
        "prune", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--method", "wanda", "--p", "0.9",
        "--calib", s(&p("cal/val.dpds")), "--out", s(&p("w.dppx")),
    ]);
    assert!((field(&w, "retention") - 0.1).abs() < 1e-3);

    // a zero delta leaves the metric unchanged
    ok(&["delta", "--base", s(&p("base.dppx")), "--fine", s(&p("base.dppx")), "--out", s(&p("zero.dppx"))]);
    let test = s(&p("ft/test.dpds")).to_string();
    let plain = ok(&["eval", "--model", s(&p("base.dppx")), "--data", &test]);
    let zero = ok(&["eval", "--model", s(&p("base.dppx")), "--delta", s(&p("zero.dppx")), "--data", &test]);
    assert_eq!(plain, zero);
    let tuned = ok(&["eval", "--model", s(&p("base.dppx")), "--delta", s(&p("d.dppx")), "--data", &test]);
    assert!(field(&tuned, "accuracy") > field(&plain, "accuracy"));

    // pack and unpack round trip bitwise
    ok(&["pack", "--in", s(&p("d.dppx")), "--out", s(&p("packed.dppx"))]);
    ok(&["unpack", "--in", s(&p("packed.dppx")), "--out", s(&p("unpacked.dppx"))]);
    assert_eq!(std::fs::read(p("d.dppx")).unwrap(), std::fs::read(p("unpacked.dppx")).unwrap());

    // rerunning from the embedded config reproduces the file
    ok(&[
        "--seed", "5", "prune", "--base", s(&p("base.dppx")), "--fine", s(&p("fine.dppx")), "--method", "dare", "--p", "0.9",
        "--out", s(&p("dare.dppx")),
    ]);
    let original = std::fs::read(p("dare.dppx")).unwrap();
    let config: serde_json::Value = serde_json::from_str(&load_delta(&p("dare.dppx")).unwrap().meta.config["cli"]).unwrap();
    std::fs::remove_file(p("dare.dppx")).unwrap();
    let argv = argv_from_config(&config);
    ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(std::fs::read(p("dare.dppx")).unwrap(), original);

    // statistics carry the aggregate rows
    ok(&["stats", "--base", s(&p("base.dppx")), "--delta", s(&p("d.dppx")), "--data", s(&p("ft/val.dpds")), "--out", s(&p("st.csv"))]);
    let stats = std::fs::read_to_string(p("st.csv")).unwrap();
    assert!(stats.lines().any(|l| l.starts_with("global:matrix,")));
}

#[test]
fn experiment_row_count_is_exact() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&["experiment", "--id", "fig5a", "--seeds", "5", "--out-dir", s(dir.path())]);
    assert_eq!(field(&stdout, "rows"), 75.0);
    let csv = dir.path().join("fig5a-reg-dare.csv");
    let rows = csv::Reader::from_path(&csv).unwrap().records().count();
    assert_eq!(rows, 5 * 3 * 5);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fig5a-reg-dare.json")).unwrap()).unwrap();
    assert_eq!(meta["experiment"]["config"]["seeds"], serde_json::json!([0, 1, 2, 3, 4]));
}
