//! Batch front end for the localization pipeline: dataset generation,
//! training, evaluation, and the verification suites, wired together by a
//! shared `key=value` run configuration.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use symploc::data::Dataset;
use symploc::eval::{evaluate, BranchMode, EvalConfig, Metrics};
use symploc::model::ModelParams;
use symploc::tape::TapeError;
use symploc::train::{train, LossRecord, TrainError};
use symploc::verify::{gradient_programs, run_gradient_program, run_invariant_suites};

const GRAD_TOL: f64 = symploc::tolerances::GRAD_CHECK_REL_TOL;

#[derive(Parser)]
#[command(
    name = "symploc",
    about = "Coarse-to-fine text-to-submap localization pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// key=value config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set seed=7 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Dataset output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint plus a loss-curve CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Loss curve CSV output path.
        #[arg(long)]
        loss_csv: PathBuf,
    },
    /// Evaluate a checkpoint: metrics JSON plus an aligned text table.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file produced by train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics JSON output path.
        #[arg(long)]
        metrics_out: PathBuf,
    },
    /// Compare every analytic gradient against central finite differences.
    GradCheck,
    /// Run the invariant suites; exits nonzero on any violation.
    Verify,
}

/// Failures sorted by contract exit code: bad configuration is 2, numeric
/// blow-ups during training are 3, everything else (including verification
/// failures) is 1.
#[derive(Debug)]
enum CliError {
    Config(String),
    NonFinite(String),
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::NonFinite(m) => write!(f, "non-finite training: {m}"),
            CliError::Failure(m) => write!(f, "{m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, set, out } => {
            let (cfg, _) = resolve_config(config.as_deref(), &set)?;
            cmd_gen_data(&cfg, &out)
        }
        Command::Train { config, set, data, checkpoint_out, loss_csv } => {
            let (cfg, _) = resolve_config(config.as_deref(), &set)?;
            cmd_train(&cfg, &data, &checkpoint_out, &loss_csv)
        }
        Command::Eval { config, set, data, checkpoint, metrics_out } => {
            let (cfg, overrides) = resolve_config(config.as_deref(), &set)?;
            cmd_eval(&cfg, &overrides, &data, &checkpoint, &metrics_out)
        }
        Command::GradCheck => cmd_grad_check(),
        Command::Verify => cmd_verify(),
    }
}

fn resolve_config(
    path: Option<&Path>,
    set: &[String],
) -> Result<(RunConfig, BTreeMap<String, String>), CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    let overrides = cfg.apply_overrides(set).map_err(CliError::Config)?;
    cfg.validate().map_err(CliError::Config)?;
    Ok((cfg, overrides))
}

fn write_file(path: &Path, bytes: &[u8], what: &str) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Failure(format!("cannot write {what} {}: {e}", path.display())))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dataset = symploc::data::generate_synthetic_dataset(&cfg.gen_config())
        .map_err(|e| CliError::Config(e.to_string()))?;
    dataset
        .save(out)
        .map_err(|e| CliError::Failure(format!("cannot write dataset: {e}")))?;
    println!(
        "wrote {} ({} submaps, {} train / {} val queries, seed {})",
        out.display(),
        dataset.submaps.len(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.seed
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset, CliError> {
    let dataset =
        Dataset::load(path).map_err(|e| CliError::Failure(format!("cannot load dataset: {e}")))?;
    if dataset.dims.feature_dim != cfg.feature_dim || dataset.dims.text_dim != cfg.text_dim {
        return Err(CliError::Config(format!(
            "dataset dims (feature {}, text {}) do not match config (feature {}, text {})",
            dataset.dims.feature_dim, dataset.dims.text_dim, cfg.feature_dim, cfg.text_dim
        )));
    }
    Ok(dataset)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
        TrainError::Step {
            source: TapeError::NonFinite { .. } | TapeError::Domain { .. },
            ..
        } => CliError::NonFinite(e.to_string()),
        TrainError::EmptyTrainSet => CliError::Config(e.to_string()),
        other => CliError::Failure(other.to_string()),
    }
}

/// One row per step; coarse rows leave `fine` empty and vice versa, so the
/// file stays a single rectangular table.
fn loss_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("step,phase,instance,relation,global,fine,total\n");
    for rec in curve {
        match *rec {
            LossRecord::Coarse { step, instance, relation, global } => {
                let _ = writeln!(
                    out,
                    "{step},coarse,{instance},{relation},{global},,{}",
                    rec.total()
                );
            }
            LossRecord::Fine { step, loss } => {
                let _ = writeln!(out, "{step},fine,,,,{loss},{}", rec.total());
            }
        }
    }
    out
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    checkpoint_out: &Path,
    loss_csv_path: &Path,
) -> Result<(), CliError> {
    let dataset = load_dataset(cfg, data)?;
    let mut params = ModelParams::init(cfg.model_config(), cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let curve = train(&dataset, &mut params, &cfg.train_config()).map_err(train_error)?;
    params
        .save(checkpoint_out)
        .map_err(|e| CliError::Failure(format!("cannot write checkpoint: {e}")))?;
    write_file(loss_csv_path, loss_csv(&curve).as_bytes(), "loss csv")?;
    let last_coarse = curve
        .iter()
        .rev()
        .find(|r| matches!(r, LossRecord::Coarse { .. }))
        .map_or(f64::NAN, LossRecord::total);
    let last_fine = curve
        .iter()
        .rev()
        .find(|r| matches!(r, LossRecord::Fine { .. }))
        .map_or(f64::NAN, LossRecord::total);
    println!(
        "wrote {} and {} ({} records; final coarse loss {:.6}, final fine loss {:.6})",
        checkpoint_out.display(),
        loss_csv_path.display(),
        curve.len(),
        last_coarse,
        last_fine
    );
    Ok(())
}

/// Serialize one mode's metrics with recall keyed exactly by the requested
/// cutoffs ("@k") and localization keyed by cutoff then threshold.
fn metrics_json(m: &Metrics) -> serde_json::Value {
    let retrieval: BTreeMap<String, f64> = m
        .k_list
        .iter()
        .zip(&m.retrieval)
        .map(|(k, v)| (format!("@{k}"), *v))
        .collect();
    let localization: BTreeMap<String, BTreeMap<String, f64>> = m
        .k_list
        .iter()
        .zip(&m.localization)
        .map(|(k, row)| {
            let per_eps: BTreeMap<String, f64> =
                m.eps_list.iter().zip(row).map(|(e, v)| (e.to_string(), *v)).collect();
            (format!("@{k}"), per_eps)
        })
        .collect();
    serde_json::json!({
        "retrieval": retrieval,
        "localization": localization,
        "mean_top1_error": m.mean_top1_error,
        "num_queries": m.num_queries,
    })
}

fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String], widths: &[usize]| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            // First column is the row label; the rest are numeric.
            if i == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "{cell:>w$}");
            }
        }
        out.push('\n');
    };
    emit(&mut out, headers, &widths);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    emit(&mut out, &rule, &widths);
    for row in rows {
        assert_eq!(row.len(), cols);
        emit(&mut out, row, &widths);
    }
    out
}

fn cmd_eval(
    cfg: &RunConfig,
    overrides: &BTreeMap<String, String>,
    data: &Path,
    checkpoint: &Path,
    metrics_out: &Path,
) -> Result<(), CliError> {
    let dataset = load_dataset(cfg, data)?;
    let params = ModelParams::load(checkpoint, cfg.model_config()).map_err(|e| match e {
        symploc::model::ModelError::Config(_) => CliError::Config(e.to_string()),
        other => CliError::Failure(format!("cannot load checkpoint: {other}")),
    })?;

    // Always report every branch alone plus the combination; the configured
    // branch only chooses which row leads the table and the headline line.
    let all_modes = [
        BranchMode::Combined,
        BranchMode::InstanceOnly,
        BranchMode::RelationOnly,
        BranchMode::GlobalOnly,
    ];
    let mut ordered: Vec<BranchMode> = vec![cfg.branch];
    ordered.extend(all_modes.iter().copied().filter(|m| *m != cfg.branch));

    let mut per_mode: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let mut table_rows: Vec<Vec<String>> = Vec::new();
    let mut headline: Option<Metrics> = None;
    for mode in &ordered {
        let eval_cfg = EvalConfig {
            k_list: cfg.k_list.clone(),
            eps_list: cfg.eps_list.clone(),
            mode: *mode,
        };
        let metrics = evaluate(&params, &dataset.submaps, &dataset.val, &eval_cfg)
            .map_err(|e| CliError::Failure(format!("evaluation failed: {e}")))?;
        per_mode.insert(mode.name().to_string(), metrics_json(&metrics));
        let mut row = vec![mode.name().to_string()];
        row.extend(metrics.retrieval.iter().map(|v| format!("{v:.4}")));
        if let Some(top1) = metrics.localization.first() {
            row.extend(top1.iter().map(|v| format!("{v:.4}")));
        }
        row.push(format!("{:.3}", metrics.mean_top1_error));
        table_rows.push(row);
        if headline.is_none() {
            headline = Some(metrics);
        }
    }
    let headline = headline.expect("at least one mode evaluated");

    let report = serde_json::json!({
        "config": cfg.echo_json(),
        "overrides": overrides,
        "selected": cfg.branch.name(),
        "num_queries": headline.num_queries,
        "modes": per_mode,
    });
    let payload = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Failure(format!("cannot encode metrics: {e}")))?;
    write_file(metrics_out, format!("{payload}\n").as_bytes(), "metrics json")?;

    let mut headers = vec!["branch".to_string()];
    headers.extend(cfg.k_list.iter().map(|k| format!("recall@{k}")));
    headers.extend(cfg.eps_list.iter().map(|e| format!("top1<={e}m")));
    headers.push("top1-err".to_string());
    print!("{}", render_table(&headers, &table_rows));
    println!(
        "selected branch {}: recall@{} = {:.4} over {} queries; metrics in {}",
        cfg.branch.name(),
        headline.k_list.first().copied().unwrap_or(1),
        headline.retrieval.first().copied().unwrap_or(f64::NAN),
        headline.num_queries,
        metrics_out.display()
    );
    Ok(())
}

fn cmd_grad_check() -> Result<(), CliError> {
    println!("gradient check: central differences, h = 1e-5, tolerance {GRAD_TOL:.1e}");
    let mut failures = 0usize;
    for program in gradient_programs() {
        let report = run_gradient_program(&program)
            .map_err(|e| CliError::Failure(format!("gradient program {}: {e}", program.name)))?;
        let ok = report.within(GRAD_TOL);
        if !ok {
            failures += 1;
        }
        let worst = report
            .worst
            .as_ref()
            .map_or(String::new(), |(name, i)| format!("  worst {name}[{i}]"));
        println!(
            "  {:<28} max rel err {:>10.3e}  ({:>4} coords)  {}{worst}",
            program.name,
            report.max_rel_err,
            report.coords_checked,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(CliError::Failure(format!(
            "{failures} gradient program(s) exceeded tolerance {GRAD_TOL:.1e}"
        )));
    }
    println!("all gradient programs within tolerance");
    Ok(())
}

fn cmd_verify() -> Result<(), CliError> {
    let reports = run_invariant_suites()
        .map_err(|e| CliError::Failure(format!("invariant suite aborted: {e}")))?;
    let mut all_ok = true;
    for report in &reports {
        print!("{}", report.render());
        all_ok &= report.passed();
    }
    if all_ok {
        println!("all invariant suites passed");
        Ok(())
    } else {
        Err(CliError::Failure("invariant suite reported violations".into()))
    }
}
