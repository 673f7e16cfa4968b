//! Acceptance gate for the whole workspace. Each test prints one
//! `ACCEPTANCE <n> <name>: PASS` line (visible under --nocapture) and
//! asserts the corresponding guarantee:
//!
//! 1. analytic gradients match central finite differences for every
//!    differentiable op and every branch loss, in under a minute;
//! 2..6. the hyperbolic, symplectic, spectral, permutation, and loss
//!    invariant suites all pass at their pinned tolerances;
//! 7. the standard benchmark trains to recall@1 >= 0.5 and recall@5 >= 0.8
//!    within the step and wall-clock budget;
//! 8. the combined ranking is at least as good as every single branch on
//!    that same run;
//! 9. dataset, checkpoint, loss-curve, and metrics artifacts are
//!    byte-identical across consecutive runs.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use symploc::tolerances::GRAD_CHECK_REL_TOL;
use symploc::verify::{
    gradient_programs, run_gradient_program, run_invariant_suites, SuiteReport,
};

fn symploc_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_symploc"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn run_ok(args: &[&str]) {
    let out = symploc_bin(args);
    assert!(
        out.status.success(),
        "`symploc {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn suites() -> &'static [SuiteReport] {
    static SUITES: OnceLock<Vec<SuiteReport>> = OnceLock::new();
    SUITES.get_or_init(|| run_invariant_suites().expect("invariant suites evaluate"))
}

fn assert_suite(number: usize, label: &str, suite_name: &str) {
    let report = suites()
        .iter()
        .find(|s| s.name == suite_name)
        .unwrap_or_else(|| panic!("no suite named {suite_name}"));
    if report.passed() {
        println!("ACCEPTANCE {number} {label}: PASS");
    } else {
        println!("ACCEPTANCE {number} {label}: FAIL\n{}", report.render());
        panic!("{label} suite reported violations");
    }
}

#[test]
fn acceptance_1_gradient_oracle() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut programs = 0usize;
    for program in gradient_programs() {
        let report = run_gradient_program(&program)
            .unwrap_or_else(|e| panic!("program {}: {e}", program.name));
        assert!(
            report.within(GRAD_CHECK_REL_TOL),
            "ACCEPTANCE 1 gradient-oracle: FAIL at {} (max rel err {:.3e} > {GRAD_CHECK_REL_TOL:.1e})",
            program.name,
            report.max_rel_err
        );
        worst = worst.max(report.max_rel_err);
        programs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient oracle took {secs:.1}s, budget is 60s");
    println!(
        "ACCEPTANCE 1 gradient-oracle: PASS ({programs} programs, worst rel err {worst:.3e}, {secs:.1}s)"
    );
}

#[test]
fn acceptance_2_hyperbolic_suite() {
    assert_suite(2, "hyperbolic-identities", "hyperbolic");
}

#[test]
fn acceptance_3_symplectic_suite() {
    assert_suite(3, "symplectic-determinants", "symplectic");
}

#[test]
fn acceptance_4_spectral_suite() {
    assert_suite(4, "chebyshev-oracle", "spectral");
}

#[test]
fn acceptance_5_permutation_suite() {
    assert_suite(5, "permutation-equivariance", "permutation");
}

#[test]
fn acceptance_6_loss_suite() {
    assert_suite(6, "loss-well-definedness", "losses");
}

/// One full run of the standard benchmark through the actual binary with
/// its default configuration, shared by criteria 7 and 8.
struct BenchmarkRun {
    metrics: serde_json::Value,
    train_secs: f64,
}

fn benchmark() -> &'static BenchmarkRun {
    static RUN: OnceLock<BenchmarkRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
        let (data, ckpt, csv, metrics) =
            (p("bench.ds"), p("bench.ckpt"), p("bench.csv"), p("bench.json"));
        run_ok(&["gen-data", "--out", &data]);
        let start = Instant::now();
        run_ok(&[
            "train",
            "--data",
            &data,
            "--checkpoint-out",
            &ckpt,
            "--loss-csv",
            &csv,
        ]);
        let train_secs = start.elapsed().as_secs_f64();
        run_ok(&["eval", "--data", &data, "--checkpoint", &ckpt, "--metrics-out", &metrics]);
        let payload = std::fs::read_to_string(&metrics).expect("metrics file");
        BenchmarkRun {
            metrics: serde_json::from_str(&payload).expect("metrics parse"),
            train_secs,
        }
    })
}

fn recall_at(run: &BenchmarkRun, mode: &str, k: usize) -> f64 {
    run.metrics["modes"][mode]["retrieval"][format!("@{k}")]
        .as_f64()
        .unwrap_or_else(|| panic!("metrics missing modes.{mode}.retrieval.@{k}"))
}

#[test]
fn acceptance_7_benchmark_recall() {
    let run = benchmark();
    let r1 = recall_at(run, "combined", 1);
    let r5 = recall_at(run, "combined", 5);
    assert!(
        run.train_secs < 600.0,
        "benchmark training took {:.0}s, budget is 600s",
        run.train_secs
    );
    assert!(r1 >= 0.5, "ACCEPTANCE 7 benchmark-recall: FAIL (recall@1 {r1:.4} < 0.5)");
    assert!(r5 >= 0.8, "ACCEPTANCE 7 benchmark-recall: FAIL (recall@5 {r5:.4} < 0.8)");
    println!(
        "ACCEPTANCE 7 benchmark-recall: PASS (recall@1 {r1:.4} >= 0.5, recall@5 {r5:.4} >= 0.8, train {:.0}s)",
        run.train_secs
    );
}

#[test]
fn acceptance_8_branch_ablation() {
    let run = benchmark();
    let combined = recall_at(run, "combined", 1);
    for single in ["instance", "relation", "global"] {
        let alone = recall_at(run, single, 1);
        assert!(
            combined >= alone,
            "ACCEPTANCE 8 branch-ablation: FAIL (combined {combined:.4} < {single} {alone:.4})"
        );
    }
    println!(
        "ACCEPTANCE 8 branch-ablation: PASS (combined {:.4} >= instance {:.4}, relation {:.4}, global {:.4})",
        combined,
        recall_at(run, "instance", 1),
        recall_at(run, "relation", 1),
        recall_at(run, "global", 1)
    );
}

const SMALL_WORLD: &str = "\
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

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn acceptance_9_artifact_determinism() {
    let dir = tempfile::tempdir().expect("tempdir");
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let cfg = p("world.cfg");
    std::fs::write(&cfg, SMALL_WORLD).expect("write config");

    for round in ["a", "b"] {
        run_ok(&["gen-data", "--config", &cfg, "--out", &p(&format!("data.{round}"))]);
        run_ok(&[
            "train",
            "--config",
            &cfg,
            "--data",
            &p(&format!("data.{round}")),
            "--checkpoint-out",
            &p(&format!("model.{round}")),
            "--loss-csv",
            &p(&format!("loss.{round}")),
        ]);
        run_ok(&[
            "eval",
            "--config",
            &cfg,
            "--data",
            &p(&format!("data.{round}")),
            "--checkpoint",
            &p(&format!("model.{round}")),
            "--metrics-out",
            &p(&format!("metrics.{round}")),
        ]);
    }
    for artifact in ["data", "model", "loss", "metrics"] {
        let a = read_bytes(&dir.path().join(format!("{artifact}.a")));
        let b = read_bytes(&dir.path().join(format!("{artifact}.b")));
        assert!(
            a == b,
            "ACCEPTANCE 9 determinism: FAIL ({artifact} differs between consecutive runs)"
        );
    }
    println!("ACCEPTANCE 9 determinism: PASS (dataset, checkpoint, loss curve, metrics byte-identical)");
}
