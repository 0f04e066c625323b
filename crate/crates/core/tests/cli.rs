//! End-to-end runs of the `udadet` binary on a tiny dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_udadet");

const SMALL_DATA: &str = "seed = 3\n[counts]\nsource = 16\ntarget_train = 16\ntarget_test = 8\n";

const SMALL_RUN: &str = r#"
[schedule]
base_iterations = 10
iterations = 12
batch_half = 2
epoch_iterations = 6
epoch_checkpoints = false

[base_optim]
warmup = 2

[srrs]
epsilon_mode = "fixed"
epsilon_fixed = 0.05
"#;

fn udadet(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("UDADET_OUT", dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn last_json(bytes: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(bytes);
    serde_json::from_str(text.lines().last().expect("no output")).unwrap()
}

/// Tiny dataset at `<dir>/data` plus a small run config at `<dir>/run.toml`.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.toml");
    fs::write(&gen, SMALL_DATA).unwrap();
    ok(&udadet(dir.path(), &["generate-data", "--config", gen.to_str().unwrap()]));
    let run = dir.path().join("run.toml");
    fs::write(&run, SMALL_RUN).unwrap();
    (dir, run)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.toml");
    fs::write(&gen, SMALL_DATA).unwrap();
    let hash = |out: &str, seed: &str| {
        let o = udadet(dir.path(), &["generate-data", "--config", s(&gen), "--seed", seed, "--out", out]);
        ok(&o);
        last_json(&o.stdout)["hash"].as_str().unwrap().to_string()
    };
    let a = hash(s(&dir.path().join("a")), "5");
    let b = hash(s(&dir.path().join("b")), "5");
    let c = hash(s(&dir.path().join("c")), "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let snap = fs::read_to_string(dir.path().join("a/generate.toml")).unwrap();
    assert!(snap.contains("seed = 5"));
}

#[test]
fn train_writes_run_contract() {
    let (dir, run) = fixture();
    let o = udadet(dir.path(), &["train", "--mode", "bsr_wst", "--config", s(&run), "--seed", "2"]);
    ok(&o);
    let out = dir.path().join("bsr_wst_s2");
    assert_eq!(last_json(&o.stdout)["mode"], "bsr_wst");
    for f in ["config.toml", "metrics.csv", "events.jsonl", "final.ckpt", "base/final.ckpt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    // the snapshot is the fully resolved config: it loads on its own
    let text = fs::read_to_string(out.join("config.toml")).unwrap();
    let snap: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(snap["seed"].as_integer(), Some(2));
    assert_eq!(snap["mode"].as_str(), Some("bsr_wst"));
    assert_eq!(snap["schedule"]["iterations"].as_integer(), Some(12));
    assert!(snap["bsr"].get("gamma").is_some());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);
}

#[test]
fn eval_and_inspect_on_a_checkpoint() {
    let (dir, run) = fixture();
    ok(&udadet(dir.path(), &["train", "--mode", "source_only", "--config", s(&run)]));
    let ckpt = dir.path().join("source_only_s0/final.ckpt");

    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        ok(&udadet(dir.path(), &["eval", "--checkpoint", s(&ckpt), "--out", s(e)]));
    }
    let a = fs::read(e1.join("eval.json")).unwrap();
    assert_eq!(a, fs::read(e2.join("eval.json")).unwrap());
    assert!(e1.join("results.csv").exists() && e1.join("eval_config.toml").exists());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v.get("per_class").is_some() && v.get("map").is_some());

    let out = dir.path().join("pl");
    let o = udadet(
        dir.path(),
        &["inspect-pseudolabels", "--checkpoint", s(&ckpt), "--confidence", "--epsilon", "0.0", "--out", s(&out)],
    );
    ok(&o);
    let text = fs::read_to_string(out.join("pseudolabels.jsonl")).unwrap();
    let n = last_json(&o.stdout)["pseudo_labels"].as_u64().unwrap();
    assert_eq!(text.lines().count() as u64, n);
    for line in text.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["image_id", "box", "class_id", "srrs", "confidence", "epsilon_used"] {
            assert!(r.get(k).is_some(), "record lacks {k}: {line}");
        }
        assert_eq!(r["box"].as_array().unwrap().len(), 4);
        assert!(r["class_id"].as_u64().unwrap() >= 1);
    }
    assert!(out.join("inspect_config.toml").exists());

    let o = udadet(
        dir.path(),
        &["inspect-pseudolabels", "--checkpoint", s(&ckpt), "--progress", "1.0", "--out", s(&out)],
    );
    ok(&o);
    let eps = last_json(&o.stdout)["epsilon"].as_f64().unwrap();
    assert!((eps - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
}

#[test]
fn ablate_runs_all_methods_from_one_base() {
    let (dir, run) = fixture();
    let out = dir.path().join("abl");
    ok(&udadet(dir.path(), &["--jobs", "2", "ablate", "--config", s(&run), "--out", s(&out)]));
    for m in ["A", "B", "C", "D", "E", "F"] {
        assert!(out.join(m).join("metrics.csv").exists(), "method {m}");
    }
    assert!(out.join("base/final.ckpt").exists());
    let mut rd = csv::Reader::from_path(out.join("comparison.csv")).unwrap();
    let names: Vec<String> = rd.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(names, ["A", "B", "C", "D", "E", "F"]);
    assert!(out.join("plots/ablation_trends.svg").exists());
    assert!(out.join("config.toml").exists());
}

#[test]
fn sweep_and_plot() {
    let (dir, run) = fixture();
    let out = dir.path().join("sw");
    let o = udadet(
        dir.path(),
        &["sweep", "--param", "gamma", "--values", "0,2", "--config", s(&run), "--out", s(&out)],
    );
    ok(&o);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("gamma_0/metrics.csv").exists() && out.join("gamma_2/metrics.csv").exists());

    let plots = dir.path().join("plots");
    let g0 = format!("g0={}", s(&out.join("gamma_0")));
    let g2 = format!("g2={}", s(&out.join("gamma_2")));
    ok(&udadet(dir.path(), &["plot", "--run", &g0, "--run", &g2, "--bsr-curves"]));
    for f in ["trends.svg", "trends.png", "bsr_gamma.svg", "bsr_t.png", "plot_config.toml"] {
        assert!(plots.join(f).exists(), "missing {f}");
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    last_json(&o.stderr)
}

#[test]
fn exit_codes() {
    let (dir, run) = fixture();
    // usage
    let o = udadet(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_line(&o)["error"], "usage");
    let o = udadet(dir.path(), &["train", "--mode", "teleport", "--config", s(&run)]);
    assert_eq!(code(&o), 2);
    let o = udadet(dir.path(), &["--jobs", "0", "train", "--config", s(&run)]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[schedule]\nitertions = 3\n").unwrap();
    let o = udadet(dir.path(), &["train", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_line(&o)["error"], "invalid_config");
    // runtime
    let o = udadet(dir.path(), &["eval", "--checkpoint", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(code(&o), 1);
    assert_eq!(error_line(&o)["exit_code"], 1);
    // divergence
    let hot = dir.path().join("hot.toml");
    fs::write(
        &hot,
        format!("{SMALL_RUN}\n[optim]\nlr = 1e30\nclip_norm = 0.0\nwarmup = 0\n"),
    )
    .unwrap();
    let o = udadet(dir.path(), &["train", "--mode", "bsr", "--config", s(&hot)]);
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_line(&o)["error"], "divergence");
}

#[test]
fn output_root_comes_from_the_environment() {
    let (dir, run) = fixture();
    ok(&udadet(dir.path(), &["train", "--mode", "source_only", "--config", s(&run), "--seed", "4"]));
    assert!(dir.path().join("source_only_s4/config.toml").exists());
    let other = dir.path().join("elsewhere");
    let o = udadet(
        dir.path(),
        &["--out-root", s(&other), "train", "--mode", "source_only", "--config", s(&run), "--data", s(&dir.path().join("data"))],
    );
    ok(&o);
    assert!(other.join("source_only_s0/metrics.csv").exists());
}
