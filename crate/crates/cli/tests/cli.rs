//! Command-line contract: exit codes, config handling, and the shapes of
//! the artifacts each subcommand writes.

use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;

fn symploc_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_symploc"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn exit_code(out: &std::process::Output) -> i32 {
    out.status.code().expect("no exit code (killed by signal?)")
}

fn stderr_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = "\
seed = 5
num_submaps = 6
grid_cols = 3
num_classes = 12
feature_dim = 6
text_dim = 11
min_instances = 3
max_instances = 4
min_hints = 2
max_hints = 3
num_train = 24
num_val = 12
embed_dim = 8
cheb_order = 3
batch = 4
coarse_steps = 12
fine_steps = 6
k_list = 1,3
eps_list = 5,10
";

/// One tiny generated-and-trained world shared by the read-only tests.
struct TinyWorld {
    _dir: tempfile::TempDir,
    cfg: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    csv: PathBuf,
}

fn tiny() -> &'static TinyWorld {
    static WORLD: OnceLock<TinyWorld> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = dir.path().join("tiny.cfg");
        let data = dir.path().join("tiny.ds");
        let ckpt = dir.path().join("tiny.ckpt");
        let csv = dir.path().join("tiny.csv");
        std::fs::write(&cfg, TINY).expect("write config");
        let s = |p: &PathBuf| p.to_str().unwrap().to_owned();
        let gen = symploc_bin(&["gen-data", "--config", &s(&cfg), "--out", &s(&data)]);
        assert!(gen.status.success(), "gen-data failed: {}", stderr_of(&gen));
        let train = symploc_bin(&[
            "train",
            "--config",
            &s(&cfg),
            "--data",
            &s(&data),
            "--checkpoint-out",
            &s(&ckpt),
            "--loss-csv",
            &s(&csv),
        ]);
        assert!(train.status.success(), "train failed: {}", stderr_of(&train));
        TinyWorld { _dir: dir, cfg, data, ckpt, csv }
    })
}

fn tiny_eval(extra: &[&str]) -> (std::process::Output, Option<serde_json::Value>) {
    let w = tiny();
    let dir = tempfile::tempdir().expect("tempdir");
    let metrics = dir.path().join("metrics.json");
    let mut args = vec![
        "eval".to_owned(),
        "--config".to_owned(),
        w.cfg.to_str().unwrap().to_owned(),
        "--data".to_owned(),
        w.data.to_str().unwrap().to_owned(),
        "--checkpoint".to_owned(),
        w.ckpt.to_str().unwrap().to_owned(),
        "--metrics-out".to_owned(),
        metrics.to_str().unwrap().to_owned(),
    ];
    args.extend(extra.iter().map(|s| (*s).to_owned()));
    let out = Command::new(env!("CARGO_BIN_EXE_symploc"))
        .args(&args)
        .output()
        .expect("binary launches");
    let parsed = std::fs::read_to_string(&metrics)
        .ok()
        .map(|text| serde_json::from_str(&text).expect("metrics json parses"));
    (out, parsed)
}

#[test]
fn unknown_config_key_exits_2() {
    let out = symploc_bin(&["gen-data", "--set", "no_such_knob=1", "--out", "/dev/null"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("unknown config key"), "stderr: {}", stderr_of(&out));
}

#[test]
fn malformed_config_line_exits_2() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed 42\n").expect("write config");
    let out = symploc_bin(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("line 1"), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_config_file_exits_2() {
    let out = symploc_bin(&["gen-data", "--config", "/nonexistent/run.cfg", "--out", "/dev/null"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn invalid_model_config_exits_2() {
    // embed_dim must be a positive multiple of 4.
    let out = symploc_bin(&["gen-data", "--set", "embed_dim=30", "--out", "/dev/null"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("invalid config"), "stderr: {}", stderr_of(&out));
}

#[test]
fn dataset_dims_mismatch_exits_2() {
    let w = tiny();
    let dir = tempfile::tempdir().expect("tempdir");
    let out = symploc_bin(&[
        "train",
        "--config",
        w.cfg.to_str().unwrap(),
        "--set",
        "feature_dim=8",
        "--data",
        w.data.to_str().unwrap(),
        "--checkpoint-out",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--loss-csv",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("do not match"), "stderr: {}", stderr_of(&out));
}

#[test]
fn divergent_training_exits_3() {
    let w = tiny();
    let dir = tempfile::tempdir().expect("tempdir");
    let out = symploc_bin(&[
        "train",
        "--config",
        w.cfg.to_str().unwrap(),
        "--set",
        "coarse_lr=1e9",
        "--data",
        w.data.to_str().unwrap(),
        "--checkpoint-out",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--loss-csv",
        dir.path().join("m.csv").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr_of(&out).contains("non-finite"), "stderr: {}", stderr_of(&out));
}

#[test]
fn verify_runs_clean() {
    let out = symploc_bin(&["verify"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"), "stdout: {stdout}");
}

#[test]
fn grad_check_covers_every_program() {
    let out = symploc_bin(&["grad-check"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let passes = stdout.lines().filter(|l| l.contains("PASS")).count();
    assert!(passes >= 45, "only {passes} PASS lines:\n{stdout}");
    assert!(!stdout.contains("FAIL"), "stdout: {stdout}");
}

#[test]
fn eval_reports_requested_metrics() {
    let (out, metrics) = tiny_eval(&[]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let metrics = metrics.expect("metrics file written");

    assert_eq!(metrics["selected"], "combined");
    assert_eq!(metrics["num_queries"], 12);
    assert_eq!(metrics["overrides"].as_object().unwrap().len(), 0);

    let modes = metrics["modes"].as_object().unwrap();
    let mut names: Vec<_> = modes.keys().cloned().collect();
    names.sort();
    assert_eq!(names, ["combined", "global", "instance", "relation"]);

    for report in modes.values() {
        let retrieval = report["retrieval"].as_object().unwrap();
        let mut ks: Vec<_> = retrieval.keys().cloned().collect();
        ks.sort();
        assert_eq!(ks, ["@1", "@3"]);
        for v in retrieval.values() {
            let r = v.as_f64().unwrap();
            assert!((0.0..=1.0).contains(&r));
        }
        let localization = report["localization"].as_object().unwrap();
        for per_k in localization.values() {
            let mut eps: Vec<_> = per_k.as_object().unwrap().keys().cloned().collect();
            eps.sort();
            assert_eq!(eps, ["10", "5"]);
        }
        assert!(report["mean_top1_error"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn eval_honors_branch_override() {
    let (out, metrics) = tiny_eval(&["--set", "branch=relation"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let metrics = metrics.expect("metrics file written");
    assert_eq!(metrics["selected"], "relation");
    assert_eq!(metrics["overrides"]["branch"], "relation");
    assert_eq!(metrics["config"]["branch"], "relation");
}

#[test]
fn loss_csv_is_rectangular() {
    let w = tiny();
    let text = std::fs::read_to_string(&w.csv).expect("loss csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,phase,instance,relation,global,fine,total"));
    let mut coarse = 0usize;
    let mut fine = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 7, "row {line:?}");
        let total: f64 = fields[6].parse().expect("total parses");
        assert!(total.is_finite());
        match fields[1] {
            "coarse" => {
                coarse += 1;
                assert!(fields[5].is_empty(), "coarse row carries a fine loss: {line:?}");
                for f in &fields[2..5] {
                    assert!(f.parse::<f64>().unwrap().is_finite());
                }
            }
            "fine" => {
                fine += 1;
                assert!(fields[2].is_empty() && fields[3].is_empty() && fields[4].is_empty());
                assert!(fields[5].parse::<f64>().unwrap().is_finite());
            }
            other => panic!("unexpected phase {other:?}"),
        }
    }
    assert_eq!((coarse, fine), (12, 6));
}
