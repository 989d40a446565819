use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nonsing::network::Mlp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn nonsing(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nonsing"))
        .args(args)
        .env_remove("MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn word(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Writes `n` random 28×28 images with labels `i % 10` and a 784-16-10 model.
fn fixture(n: u32) -> (TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut images: Vec<u8> = [0x803, n, 28, 28].iter().flat_map(|&w| word(w)).collect();
    images.extend((0..n as usize * 784).map(|i| (i * 37 % 256) as u8));
    let mut labels: Vec<u8> = [0x801, n].iter().flat_map(|&w| word(w)).collect();
    labels.extend((0..n).map(|i| (i % 10) as u8));
    let img = dir.path().join("images");
    let lbl = dir.path().join("labels");
    std::fs::write(&img, images).unwrap();
    std::fs::write(&lbl, labels).unwrap();
    let model = dir.path().join("model.json");
    Mlp::glorot(&[784, 16, 10], &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .save(&model)
        .unwrap();
    (dir, img, lbl, model)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    serde_json::from_str(&std::fs::read_to_string(PathBuf::from(name)).unwrap()).unwrap()
}

#[test]
fn bound_reports_every_pair() {
    let (dir, img, lbl, model) = fixture(3);
    let out = dir.path().join("bound.json");
    let o = nonsing(&[
        "bound",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "0",
        "--eps-x",
        "0.1",
        "--eps-w",
        "0.01",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 90);
    for r in reports {
        let f = |k: &str| r[k].as_f64().unwrap();
        assert!((f("upper_bound") - (f("margin") + f("tau") + f("zeta"))).abs() < 1e-12);
    }
    let m = manifest(&out);
    assert_eq!(m["subcommand"], "bound");
    assert!(m["tool_version"].is_string());

    let single = nonsing(&[
        "bound",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "0",
        "--eps-x",
        "0.1",
        "--eps-w",
        "0.01",
        "--layer",
        "2",
    ]);
    assert!(single.status.success());
    let single: serde_json::Value = serde_json::from_slice(&single.stdout).unwrap();
    assert_eq!(single[0]["layer"], 2);
    assert!(single[0]["upper_bound"].as_f64().unwrap() >= single[0]["margin"].as_f64().unwrap());

    let stdout = nonsing(&[
        "bound",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "1",
    ]);
    assert!(stdout.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&stdout.stdout).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 90);
}

#[test]
fn usage_errors_exit_two() {
    let o = nonsing(&["bound", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--no-such-flag"));
    assert_eq!(nonsing(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nonsing(&["--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_exit_one() {
    let (dir, img, lbl, model) = fixture(2);
    let missing = dir.path().join("absent.json");
    let o = nonsing(&[
        "bound",
        "--model",
        s(&missing),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = nonsing(&[
        "bound",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = nonsing(&[
        "bound",
        "--model",
        s(&model),
        "--data",
        s(&lbl),
        s(&img),
        "--input-index",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn verify_bound_passes_and_writes_manifest() {
    let (dir, img, lbl, model) = fixture(2);
    let out = dir.path().join("verify.json");
    let o = nonsing(&[
        "verify-bound",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "0",
        "--eps-x",
        "0.05",
        "--eps-w",
        "0.005",
        "--samples",
        "50",
        "--seed",
        "7",
        "--ascent-steps",
        "5",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["violation_count"], 0);
    assert_eq!(manifest(&out)["seed"], 7);

    let single = nonsing(&[
        "verify-bound",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-index",
        "1",
        "--eps-x",
        "0.05",
        "--eps-w",
        "0.01",
        "--layer",
        "2",
        "--samples",
        "50",
    ]);
    assert_eq!(single.status.code(), Some(0));
}

#[test]
fn attack_emits_json_lines() {
    let (dir, img, lbl, model) = fixture(4);
    let out = dir.path().join("attack.jsonl");
    let o = nonsing(&[
        "attack",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--mode",
        "joint",
        "--steps",
        "3",
        "--eps-x",
        "0.1",
        "--eps-w",
        "0.01",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for (k, l) in lines.iter().enumerate() {
        assert_eq!(l["index"], k);
        for key in ["clean_pred", "attacked_pred", "final_loss"] {
            assert!(!l[key].is_null());
        }
    }
    assert_eq!(manifest(&out)["config"]["mode"], "joint");
    let bad = nonsing(&[
        "attack",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--input-clamp",
        "up",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_grid_writes_csv_and_summary() {
    let (dir, img, lbl, model) = fixture(3);
    let out = dir.path().join("grid.csv");
    let o = nonsing(&[
        "eval-grid",
        "--model",
        s(&model),
        "--data",
        s(&img),
        s(&lbl),
        "--grid-steps",
        "2",
        "--samples",
        "3",
        "--attack-steps",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "eps_x,eps_w,accuracy");
    assert_eq!(rows.len(), 5);
    let mut summary = out.as_os_str().to_owned();
    summary.push(".summary.json");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(PathBuf::from(summary)).unwrap()).unwrap();
    let auc = summary["auc"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&auc));
    assert_eq!(summary["spec"]["sample_count"], 3);
}

#[test]
fn train_is_reproducible_from_its_manifest() {
    let (dir, img, lbl, _) = fixture(6);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let metrics = dir.path().join(format!("{name}.jsonl"));
        let o = nonsing(&[
            "train",
            "--regime",
            "weight-perturb",
            "--epochs",
            "2",
            "--batch-size",
            "3",
            "--seed",
            "5",
            "--data",
            s(&img),
            s(&lbl),
            "--out",
            s(&out),
            "--metrics",
            s(&metrics),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (out, metrics)
    };
    let (a, metrics) = run("a.json");
    let (b, _) = run("b.json");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let net = Mlp::load(&a).unwrap();
    assert_eq!(net.depth(), 4);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    let m = manifest(&a);
    assert_eq!(m["config"]["regime"], "weight_perturb");
    assert_eq!(m["config"]["loss_cfg"]["alpha"], 0.25);
    assert_eq!(m["seed"], 5);

    let bad = nonsing(&[
        "train",
        "--regime",
        "standard",
        "--alpha",
        "0.5",
        "--data",
        s(&img),
        s(&lbl),
        "--out",
        s(&a),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
