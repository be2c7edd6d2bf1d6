//! `atfs-lab` — desk-scale adversarial training with feature separability.
//!
//! Four subcommands share one JSON run config:
//!
//! * `train`   — train a model, track the best validation checkpoint, and
//!   write `metrics.csv`, `best.ckpt(.json)`, and `report.json`;
//! * `eval`    — re-evaluate a checkpoint against the configured attack
//!   suite and write `report.json`;
//! * `analyze` — feature-space diagnostics for a checkpoint: similarity
//!   matrices, boundary thickness, and a 2-D PCA export;
//! * `sweep`   — `train` across a grid of `lambda_fs` / `eta1` values and
//!   collect a summary table.
//!
//! Every run lives in `<output_dir>/run-<hash>` where the hash covers the
//! canonicalized config, so a config maps to exactly one directory. Exit
//! codes: 0 on success, 2 for config errors (the message points at the
//! failing field), 1 for everything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atfs_core::{
    analyze_model, apply_override, atomic_write, build_model, evaluate_robust, load_dataset,
    read_checkpoint, train, write_checkpoint, write_features_2d_csv, write_features_raw_csv,
    write_metrics_csv, write_report_json, write_similarity_csv, write_sweep_summary_csv,
    write_thickness_json, AtfsError, CheckpointMeta, Network, Result, RunConfig, RunDir,
    RunReport, SimilarityMatrix, SweepRow, ARTIFACT_VERSION,
};

/// The ablation grid used when `sweep` is invoked without `--grid`:
/// the FS-loss weight axis and the two published clean/adversarial link
/// weights.
const DEFAULT_LAMBDA_FS_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
const DEFAULT_ETA1_GRID: [f64; 2] = [1.0, 3.0];

#[derive(Parser)]
#[command(name = "atfs-lab", version, about = "Adversarial training with feature separability")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; shorthand for --set train.seed=N (applied first).
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config field before validation, e.g. --set train.lambda_fs=0.5.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, the best checkpoint, and a report.
    Train(ConfigArgs),
    /// Evaluate a checkpoint against the configured attack suite.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint blob; defaults to <run-dir>/best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analyze a checkpoint's feature space (similarity, thickness, PCA).
    Analyze {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint blob; defaults to <run-dir>/best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train across a lambda_fs / eta1 grid and write a summary table.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Grid axis, e.g. --grid lambda_fs=0.05,0.1,0.5,1.0 (repeatable;
        /// keys: lambda_fs, eta1). Without --grid both default axes run.
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                AtfsError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Train(common) => cmd_train(common),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()),
        Command::Analyze { common, checkpoint } => cmd_analyze(common, checkpoint.as_deref()),
        Command::Sweep { common, grid } => cmd_sweep(common, grid),
    }
}

/// Reads the config file and applies `--seed` / `--set` overrides onto the
/// raw JSON value, before parsing, so overrides participate in the run hash.
fn load_config_value(args: &ConfigArgs) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        AtfsError::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| AtfsError::Config(format!("{}: not valid JSON: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        apply_override(&mut value, &format!("train.seed={seed}"))?;
    }
    for assignment in &args.set {
        apply_override(&mut value, assignment)?;
    }
    Ok(value)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::from_value(load_config_value(args)?)
}

/// Claims the run directory (lock file) and echoes the canonical config
/// into it. Returns the parsed echo for embedding into artifacts.
fn claim_run_dir(cfg: &RunConfig) -> Result<(RunDir, serde_json::Value)> {
    let echo_text = cfg.canonical_json()?;
    let echo_value: serde_json::Value = serde_json::from_str(&echo_text)?;
    let dir = RunDir::create(&cfg.run_dir()?)?;
    atomic_write(&dir.file("config.json"), echo_text.as_bytes())?;
    Ok((dir, echo_value))
}

fn build_configured_model(cfg: &RunConfig) -> Result<Network> {
    build_model(
        &cfg.model,
        cfg.dataset.input_shape(),
        cfg.dataset.num_classes(),
        cfg.train.seed,
    )
}

fn load_checkpoint_into_model(cfg: &RunConfig, path: &Path) -> Result<(Network, CheckpointMeta)> {
    let (ckpt, meta) = read_checkpoint(path)?;
    let mut model = build_configured_model(cfg)?;
    if model.param_count() != ckpt.params.len() {
        return Err(AtfsError::Checkpoint(format!(
            "{} holds {} parameters, the configured model expects {}",
            path.display(),
            ckpt.params.len(),
            model.param_count()
        )));
    }
    model.load_param_vector(ckpt.params.view())?;
    Ok((model, meta))
}

/// Full training pipeline inside an already-claimed run directory; shared
/// by `train` and each `sweep` cell.
fn run_training(cfg: &RunConfig, dir: &RunDir, echo: &serde_json::Value) -> Result<RunReport> {
    let data = load_dataset(&cfg.dataset)?;
    let mut model = build_configured_model(cfg)?;
    let (state, best) = train(&cfg.train, &data, &mut model)?;
    write_metrics_csv(&dir.file("metrics.csv"), &state.history)?;
    model.load_param_vector(best.params.view())?;
    let test = evaluate_robust(&model, &data.test, &cfg.eval.attacks, cfg.train.seed)?;
    write_checkpoint(&dir.file("best.ckpt"), &best, echo)?;
    let report = RunReport {
        format_version: ARTIFACT_VERSION,
        run_hash: cfg.run_hash()?,
        train_label_histogram: data.train.label_histogram(),
        val_label_histogram: data.val.label_histogram(),
        test_label_histogram: data.test.label_histogram(),
        best_epoch: state.best_epoch,
        best_val_robust_acc: (!state.best_val_robust_acc.is_nan())
            .then_some(state.best_val_robust_acc),
        test,
        config: echo.clone(),
    };
    write_report_json(&dir.file("report.json"), &report)?;
    Ok(report)
}

fn print_report(report: &RunReport) {
    match report.best_epoch {
        Some(e) => println!(
            "best epoch {e}  val robust acc {:.4}",
            report.best_val_robust_acc.unwrap_or(f64::NAN)
        ),
        None => println!("no validation epochs ran; initial parameters kept"),
    }
    println!("test clean acc {:.4}", report.test.clean_accuracy);
    for attack in &report.test.attacks {
        println!("test {} robust acc {:.4}", attack.name, attack.robust_accuracy);
    }
}

fn cmd_train(common: &ConfigArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let (dir, echo) = claim_run_dir(&cfg)?;
    println!("run {} -> {}", cfg.run_hash()?, dir.root().display());
    let report = run_training(&cfg, &dir, &echo)?;
    print_report(&report);
    Ok(())
}

fn cmd_eval(common: &ConfigArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let default_path = cfg.run_dir()?.join("best.ckpt");
    let ckpt_path = checkpoint.unwrap_or(&default_path);
    let (model, meta) = load_checkpoint_into_model(&cfg, ckpt_path)?;
    let data = load_dataset(&cfg.dataset)?;
    let test = evaluate_robust(&model, &data.test, &cfg.eval.attacks, cfg.train.seed)?;
    let (dir, echo) = claim_run_dir(&cfg)?;
    let report = RunReport {
        format_version: ARTIFACT_VERSION,
        run_hash: cfg.run_hash()?,
        train_label_histogram: data.train.label_histogram(),
        val_label_histogram: data.val.label_histogram(),
        test_label_histogram: data.test.label_histogram(),
        // The checkpoint sidecar remembers whether validation ever ran.
        best_epoch: meta.val_robust_acc.is_some().then_some(meta.epoch),
        best_val_robust_acc: meta.val_robust_acc,
        test,
        config: echo.clone(),
    };
    write_report_json(&dir.file("report.json"), &report)?;
    println!("run {} -> {}", report.run_hash, dir.root().display());
    print_report(&report);
    Ok(())
}

fn similarity_summary(sim: &SimilarityMatrix) -> (f64, f64) {
    let c = sim.matrix.nrows();
    let (mut diag, mut off) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..c {
        for j in 0..c {
            if !sim.defined[[i, j]] {
                continue;
            }
            let slot = if i == j { &mut diag } else { &mut off };
            slot.0 += sim.matrix[[i, j]];
            slot.1 += 1;
        }
    }
    (diag.0 / diag.1.max(1) as f64, off.0 / off.1.max(1) as f64)
}

fn cmd_analyze(common: &ConfigArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let default_path = cfg.run_dir()?.join("best.ckpt");
    let ckpt_path = checkpoint.unwrap_or(&default_path);
    let (model, _meta) = load_checkpoint_into_model(&cfg, ckpt_path)?;
    let data = load_dataset(&cfg.dataset)?;
    let report = analyze_model(&model, &data.test, &cfg.analysis, cfg.train.seed)?;

    let (dir, _echo) = claim_run_dir(&cfg)?;
    write_features_2d_csv(&dir.file("features_2d.csv"), &report.embedding)?;
    write_features_raw_csv(
        &dir.file("features_raw.csv"),
        &report.raw_features,
        &report.node_labels,
        &report.node_kinds,
    )?;
    write_similarity_csv(&dir.file("similarity.csv"), &report.similarity_adv)?;
    write_similarity_csv(&dir.file("similarity_clean.csv"), &report.similarity_clean)?;
    write_thickness_json(&dir.file("thickness.json"), &report.thickness)?;

    println!("analysis -> {}", dir.root().display());
    println!(
        "boundary thickness {:.4} over {} pairs",
        report.thickness.value, report.thickness.pairs_used
    );
    let (diag, off) = similarity_summary(&report.similarity_adv);
    println!("adversarial similarity: intra (diag) {diag:.4}, inter (off-diag) {off:.4}");
    let (diag, off) = similarity_summary(&report.similarity_clean);
    println!("clean similarity: intra (diag) {diag:.4}, inter (off-diag) {off:.4}");
    Ok(())
}

/// Parses repeatable `--grid key=v1,v2,...` flags; keys may appear once.
fn parse_grid(specs: &[String]) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let mut lambda_axis: Option<Vec<f64>> = None;
    let mut eta_axis: Option<Vec<f64>> = None;
    for spec in specs {
        let (key, list) = spec.split_once('=').ok_or_else(|| {
            AtfsError::Config(format!("grid {spec:?} must look like key=v1,v2,..."))
        })?;
        let values: Vec<f64> = list
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    AtfsError::Config(format!("grid value {v:?} is not a number"))
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(AtfsError::Config(format!("grid {key:?} has no values")));
        }
        let slot = match key {
            "lambda_fs" => &mut lambda_axis,
            "eta1" => &mut eta_axis,
            other => {
                return Err(AtfsError::Config(format!(
                    "unknown grid key {other:?} (expected lambda_fs or eta1)"
                )))
            }
        };
        if slot.is_some() {
            return Err(AtfsError::Config(format!("grid key {key:?} given twice")));
        }
        *slot = Some(values);
    }
    Ok((lambda_axis, eta_axis))
}

fn cmd_sweep(common: &ConfigArgs, grid: &[String]) -> Result<()> {
    let base_value = load_config_value(common)?;
    let base_cfg = RunConfig::from_value(base_value.clone())?;
    let (mut lambda_axis, mut eta_axis) = parse_grid(grid)?;
    if lambda_axis.is_none() && eta_axis.is_none() {
        lambda_axis = Some(DEFAULT_LAMBDA_FS_GRID.to_vec());
        eta_axis = Some(DEFAULT_ETA1_GRID.to_vec());
    }
    // An axis not swept stays pinned at the base config's value.
    let lambda_values = lambda_axis.unwrap_or_else(|| vec![base_cfg.train.lambda_fs]);
    let eta_values = eta_axis.unwrap_or_else(|| vec![base_cfg.train.link_weights.eta1]);

    let attack_names: Vec<String> = base_cfg
        .eval
        .attacks
        .iter()
        .map(|a| a.name.clone())
        .collect();
    let mut rows = Vec::with_capacity(lambda_values.len() * eta_values.len());
    for &lambda_fs in &lambda_values {
        for &eta1 in &eta_values {
            let mut value = base_value.clone();
            apply_override(&mut value, &format!("train.lambda_fs={lambda_fs}"))?;
            apply_override(&mut value, &format!("train.link_weights.eta1={eta1}"))?;
            let cfg = RunConfig::from_value(value)?;
            let (dir, echo) = claim_run_dir(&cfg)?;
            println!(
                "sweep lambda_fs={lambda_fs} eta1={eta1} -> {}",
                dir.root().display()
            );
            let report = run_training(&cfg, &dir, &echo)?;
            rows.push(SweepRow {
                lambda_fs,
                eta1,
                run_hash: report.run_hash.clone(),
                best_epoch: report.best_epoch,
                best_val_robust_acc: report.best_val_robust_acc.unwrap_or(f64::NAN),
                test_clean_acc: report.test.clean_accuracy,
                test_attacks: report
                    .test
                    .attacks
                    .iter()
                    .map(|a| a.robust_accuracy)
                    .collect(),
            });
        }
    }

    let summary_path = base_cfg.output_dir.join("sweep_summary.csv");
    write_sweep_summary_csv(&summary_path, &attack_names, &rows)?;
    println!("summary -> {}", summary_path.display());
    println!(
        "{:>9} {:>6} {:>10} {:>10} {:>8} {}",
        "lambda_fs",
        "eta1",
        "best_ep",
        "val_rob",
        "clean",
        attack_names.join(" ")
    );
    for row in &rows {
        let best = row
            .best_epoch
            .map_or_else(|| "-".to_string(), |e| e.to_string());
        let attacks: Vec<String> = row.test_attacks.iter().map(|v| format!("{v:.4}")).collect();
        println!(
            "{:>9} {:>6} {:>10} {:>10.4} {:>8.4} {}",
            row.lambda_fs,
            row.eta1,
            best,
            row.best_val_robust_acc,
            row.test_clean_acc,
            attacks.join(" ")
        );
    }
    Ok(())
}
