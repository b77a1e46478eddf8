use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kadp::denoiser::DenoiserModel;
use kadp::env::Dataset;

const SMALL: [&str; 10] = [
    "--set",
    "denoiser.points=32",
    "--set",
    "denoiser.width=16",
    "--set",
    "denoiser.blocks=1",
    "--set",
    "denoiser.epochs=4",
    "--set",
    "denoiser.batch_size=32",
];

fn kadp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kadp"))
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = kadp(dir, args);
    assert!(
        o.status.success(),
        "kadp {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn err_line(o: &Output) -> String {
    assert!(!o.status.success());
    let e = String::from_utf8_lossy(&o.stderr);
    e.lines().find(|l| l.starts_with("error[")).unwrap_or_default().to_string()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn demos(dir: &Path, run: &str, count: &str) -> PathBuf {
    ok(dir, &with_small(&["gen-demos", "--count", count, "--run-id", run]));
    dir.join("out").join(run).join("results/dataset.json")
}

#[test]
fn default_demo_run_records_twenty_successes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-demos", "--run-id", "d"]);
    let ds = Dataset::load(&dir.path().join("out/d/results/dataset.json")).unwrap();
    assert_eq!(ds.demos.len(), 20);
    assert!(ds.demos.iter().all(|d| d.success));
    let run = dir.path().join("out/d");
    for f in ["manifest.json", "config.toml", "checkpoints", "logs", "results"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join(".lock").exists());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-demos");
    assert!(m["outputs"]["results/dataset.json"].is_string());
}

#[test]
fn single_demo_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = demos(dir.path(), "a", "1");
    let b = demos(dir.path(), "b", "1");
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.demos.len(), 1);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // The saved config reproduces the run.
    let cfg = dir.path().join("out/a/config.toml");
    ok(dir.path(), &["gen-demos", "--config", cfg.to_str().unwrap(), "--run-id", "c"]);
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(dir.path().join("out/c/results/dataset.json")).unwrap()
    );
}

#[test]
fn default_run_ids_follow_the_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["gen-demos", "--count", "1"]));
    ok(dir.path(), &with_small(&["gen-demos", "--count", "1"]));
    ok(dir.path(), &with_small(&["gen-demos", "--count", "2"]));
    let runs = std::fs::read_dir(dir.path().join("out")).unwrap().count();
    assert_eq!(runs, 2);
}

#[test]
fn errors_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let o = kadp(dir.path(), &["gen-demos", "--set", "denoiser.widht=3"]);
    assert!(err_line(&o).starts_with("error[config]"), "{}", err_line(&o));
    assert!(err_line(&o).contains("widht"));

    let o = kadp(dir.path(), &["train-ik", "--set", "ikmlp.samples=0"]);
    assert!(err_line(&o).starts_with("error[contract]"), "{}", err_line(&o));

    let o = kadp(dir.path(), &["train-policy", "--dataset", "missing/demos.json"]);
    let line = err_line(&o);
    assert!(line.starts_with("error[missing-artifact]") && line.contains("missing/demos.json"), "{line}");

    let o = kadp(dir.path(), &["eval", "--checkpoint", "gone/policy.json"]);
    let line = err_line(&o);
    assert!(line.starts_with("error[missing-artifact]") && line.contains("gone/policy.json"), "{line}");

    let o = kadp(dir.path(), &["no-such-command"]);
    assert!(err_line(&o).starts_with("error[usage]"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn constrained_training_names_the_missing_ik_network() {
    let dir = tempfile::tempdir().unwrap();
    let ds = demos(dir.path(), "d", "1");
    let o = kadp(dir.path(), &with_small(&["train-policy", "--dataset", ds.to_str().unwrap()]));
    let line = err_line(&o);
    assert!(line.starts_with("error[config]") && line.contains("IK MLP"), "{line}");
}

#[test]
fn locked_run_directories_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("out/busy");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "4242\n").unwrap();
    let o = kadp(dir.path(), &["gen-demos", "--count", "1", "--run-id", "busy"]);
    let line = err_line(&o);
    assert!(line.starts_with("error[io]") && line.contains("4242"), "{line}");
}

fn meta(path: &Path) -> kadp::denoiser::ModelMeta {
    DenoiserModel::load(path).unwrap().meta
}

#[test]
fn baselines_and_the_unconstrained_variant() {
    let dir = tempfile::tempdir().unwrap();
    let ds = demos(dir.path(), "d", "2");
    let d = ds.to_str().unwrap();
    ok(dir.path(), &with_small(&["train-policy", "--dataset", d, "--no-kc", "--run-id", "nokc"]));
    let m = meta(&dir.path().join("out/nokc/checkpoints/policy.json"));
    assert_eq!((m.representation.as_str(), m.constrained), ("node", false));
    for r in ["joint", "ee"] {
        ok(dir.path(), &with_small(&["train-policy", "--dataset", d, "--representation", r, "--run-id", r]));
        let m = meta(&dir.path().join(format!("out/{r}/checkpoints/policy.json")));
        assert_eq!((m.representation.as_str(), m.constrained), (r, false));
    }
    ok(dir.path(), &with_small(&["train-ik", "--set", "ikmlp.samples=500", "--set", "ikmlp.train.epochs=2", "--run-id", "ik"]));
    let ik = dir.path().join("out/ik/checkpoints/ik_mlp.json");
    ok(dir.path(), &with_small(&["train-policy", "--dataset", d, "--ik-mlp", ik.to_str().unwrap(), "--run-id", "kc"]));
    let m = meta(&dir.path().join("out/kc/checkpoints/policy.json"));
    assert!(m.constrained && m.ik_mlp_hash.is_some());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/ik/results/ik_report.json")).unwrap()).unwrap();
    assert!(report["val_rmse_rad"].as_f64().unwrap().is_finite());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = demos(dir.path(), "d", "2");
    let d = ds.to_str().unwrap();
    let base = ["train-policy", "--dataset", d, "--no-kc"];
    ok(dir.path(), &with_small(&[&base[..], &["--run-id", "full"]].concat()));
    let o = ok(dir.path(), &with_small(&[&base[..], &["--run-id", "cut", "--stop-after-epochs", "2"]].concat()));
    assert!(String::from_utf8_lossy(&o.stdout).contains("--resume"));
    assert!(!dir.path().join("out/cut/checkpoints/policy.json").exists());
    ok(dir.path(), &with_small(&[&base[..], &["--run-id", "cut", "--resume"]].concat()));
    for f in ["checkpoints/policy.json", "checkpoints/policy_best.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("out/full").join(f)).unwrap(),
            std::fs::read(dir.path().join("out/cut").join(f)).unwrap(),
            "{f}"
        );
    }
    let losses = |run: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(format!("out/{run}/logs/train.csv")))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(losses("full"), losses("cut"));
}

#[test]
fn evaluation_writes_tables_and_reuses_its_cache() {
    let dir = tempfile::tempdir().unwrap();
    let ds = demos(dir.path(), "d", "3");
    let d = ds.to_str().unwrap();
    ok(dir.path(), &with_small(&["train-policy", "--dataset", d, "--no-kc", "--run-id", "p"]));
    let p = dir.path().join("out/p/checkpoints/policy.json");
    let spec = format!("nokc={}", p.display());
    let args = with_small(&["eval", "--checkpoint", &spec, "--replay", d, "--set", "eval.episodes=3", "--run-id", "e"]);
    let first = ok(dir.path(), &args);
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("nokc") && stdout.contains("replay"));
    let res = dir.path().join("out/e/results");
    let episodes = std::fs::read_to_string(res.join("episodes.csv")).unwrap();
    assert!(episodes.starts_with(
        "cell,task,representation,constrained,seed,episode,success,steps,collision,flagged,mean_ik_error\n"
    ));
    assert_eq!(episodes.lines().count(), 1 + 2 * 3 * 3);
    let mut summary = csv::Reader::from_path(res.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = summary.records().map(|r| r.unwrap()).collect();
    let header = summary.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "success_mean").unwrap();
    let replay = rows.iter().find(|r| &r[0] == "replay").unwrap();
    assert_eq!(replay[col].parse::<f64>().unwrap(), 1.0);
    assert!(res.join("ik_error_hist.csv").exists() && res.join("summary.txt").exists());

    let second = ok(dir.path(), &args);
    let log = String::from_utf8_lossy(&second.stderr);
    assert_eq!(log.matches("served from cache").count(), 2, "{log}");
    assert_eq!(std::fs::read_to_string(res.join("episodes.csv")).unwrap(), episodes);
}

#[test]
fn ik_bench_reports_timing_and_residuals() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ik-bench", "--targets", "2000", "--run-id", "b"]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/b/results/ik_bench.json")).unwrap()).unwrap();
    for mode in ["warm", "cold"] {
        for key in ["mean_ms", "p50_ms", "p99_ms", "mean_residual_m"] {
            assert!(r[mode][key].as_f64().unwrap().is_finite(), "{mode}.{key}");
        }
    }
    assert!(r["warm"]["mean_ms"].as_f64().unwrap() < r["cold"]["mean_ms"].as_f64().unwrap());
    assert!(r["warm"]["max_residual_m"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn chain_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let chain = dir.path().join("arm.toml");
    kadp::kinematics::presets::planar_3link().save(&chain).unwrap();
    let set = format!("chain.file=\"{}\"", chain.display());
    ok(dir.path(), &["ik-bench", "--targets", "50", "--set", &set, "--run-id", "b"]);
    ok(dir.path(), &with_small(&["gen-demos", "--count", "1", "--set", &set, "--run-id", "d"]));
    let o = kadp(dir.path(), &["ik-bench", "--set", "chain.file=\"nowhere.toml\""]);
    assert!(err_line(&o).starts_with("error[missing-artifact]"));
}
