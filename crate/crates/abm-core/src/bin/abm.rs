//! Command-line surface: checkpoint merging, staged training runs,
//! policy optimization, and the diagnostic suites, each emitting
//! machine-readable JSON plus a run manifest.
//!
//! Exit codes: 0 ok, 2 shape mismatch, 3 I/O, 4 numeric failure,
//! 5 stage failure, 6 usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use abm_core::checkpoint::{read_checkpoint, write_checkpoint, CkptError};
use abm_core::domains::make_synthetic_domains;
use abm_core::grpo::{grpo_train, make_env, policy_model, GrpoConfig, GrpoError};
use abm_core::interference::{
    gradient_conflict_matrix, scaffold_transfer_experiment, verify_bound_quadratic, BoundSpec,
    TransferExperimentSpec,
};
use abm_core::manifest::RunManifest;
use abm_core::merge::{compute_task_vector, merge, MergeConfig, MergeError, MergeMethod};
use abm_core::model::ToyModel;
use abm_core::train::{
    joint_baseline, sequential_baseline, ssr_pipeline, write_pipeline_output, SsrConfig,
    TrainError, TrainSet,
};

const EXIT_SHAPE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_STAGE: u8 = 5;
const EXIT_USAGE: u8 = 6;

#[derive(Parser)]
#[command(name = "abm", version, about = "Staged multi-domain training and data-free model merging at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge expert checkpoints over a base checkpoint.
    Merge(MergeArgs),
    /// Run a full training paradigm on the synthetic suite.
    TrainSsr(TrainArgs),
    /// Optimize a toy policy against a named environment.
    Grpo(GrpoArgs),
    /// Bound verification, conflict matrices, and the transfer sweep.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct MergeArgs {
    /// Base checkpoint (ABM-CKPT v1).
    #[arg(long)]
    base: PathBuf,
    /// Expert checkpoints; repeatable.
    #[arg(long = "expert", required = true)]
    experts: Vec<PathBuf>,
    /// avg, tsvm, or wudi.
    #[arg(long, default_value = "wudi")]
    method: MergeMethod,
    /// Optimizer iterations (reconcile-stage recipe).
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Optimizer learning rate (reconcile-stage recipe).
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path; the merge report lands beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON SsrConfig; omit for the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ssr, sequential, or joint.
    #[arg(long, default_value = "ssr")]
    paradigm: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GrpoArgs {
    /// Environment name: bandit4, seq3, or constant.
    #[arg(long)]
    env: String,
    /// JSON GrpoConfig; omit for defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// bound, conflict, or transfer.
    #[arg(long)]
    mode: String,
    /// JSON spec for the chosen mode; omit for defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::TrainSsr(args) => cmd_train_ssr(args),
        Command::Grpo(args) => cmd_grpo(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    code
}

fn merge_error_code(e: &MergeError) -> u8 {
    match e {
        MergeError::Incompatible(_) => EXIT_SHAPE,
        MergeError::NonFiniteGradient { .. } | MergeError::ZeroNormTau => EXIT_NUMERIC,
        MergeError::Tensor(_) => EXIT_NUMERIC,
        MergeError::NoModels | MergeError::NoExperts => EXIT_USAGE,
    }
}

fn train_error_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Stage { .. } => EXIT_STAGE,
        TrainError::Diverged { .. } => EXIT_NUMERIC,
        TrainError::Ckpt(c) => ckpt_error_code(c),
        TrainError::Merge(m) => merge_error_code(m),
        _ => EXIT_USAGE,
    }
}

fn ckpt_error_code(e: &CkptError) -> u8 {
    match e {
        CkptError::Io { .. } => EXIT_IO,
        CkptError::NanPayload { .. } => EXIT_NUMERIC,
        _ => EXIT_SHAPE,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), u8> {
    std::fs::create_dir_all(dir)
        .map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), u8> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, json)
        .map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>, u8> {
    let Some(path) = path else { return Ok(None) };
    let bytes = std::fs::read(path)
        .map_err(|e| fail(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| fail(EXIT_USAGE, format!("bad config {}: {e}", path.display())))
}

fn cmd_merge(args: MergeArgs) -> Result<(), u8> {
    let base = read_checkpoint(&args.base).map_err(|e| fail(ckpt_error_code(&e), e))?;
    let mut tvs = Vec::new();
    for path in &args.experts {
        let expert = read_checkpoint(path).map_err(|e| fail(ckpt_error_code(&e), e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "expert".to_string());
        tvs.push(
            compute_task_vector(&expert, &base, id).map_err(|e| fail(merge_error_code(&e), e))?,
        );
    }
    let cfg = MergeConfig {
        method: args.method,
        iterations: args.iters,
        learning_rate: args.lr,
        seed: args.seed,
        ..MergeConfig::default()
    };
    let (merged, report) = merge(&base, &tvs, &cfg).map_err(|e| fail(merge_error_code(&e), e))?;
    write_checkpoint(&merged, &args.out).map_err(|e| fail(ckpt_error_code(&e), e))?;
    let report_path = args.out.with_extension("report.json");
    if let Some(report) = &report {
        write_json(&report_path, report)?;
        eprintln!(
            "merged {} experts ({:?}); final objective {:.6e}; wall {:.2}s",
            tvs.len(),
            args.method,
            report.final_objective,
            report.wall_time_secs
        );
    } else {
        eprintln!("merged {} experts ({:?})", tvs.len(), args.method);
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            let manifest = RunManifest::new(
                "merge",
                serde_json::to_value(&cfg).expect("config serializes"),
                args.seed,
            )
            .with_outputs(vec![args.out.display().to_string()]);
            // A merge may share its directory with other runs; only the
            // first writer records the manifest.
            let _ = manifest.write(dir);
        }
    }
    Ok(())
}

fn cmd_train_ssr(args: TrainArgs) -> Result<(), u8> {
    let mut cfg: SsrConfig = read_config(&args.config)?.unwrap_or_default();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = match args.paradigm.as_str() {
        "ssr" => ssr_pipeline(&cfg),
        "sequential" => sequential_baseline(&cfg),
        "joint" => joint_baseline(&cfg),
        other => return Err(fail(EXIT_USAGE, format!("unknown paradigm {other:?}"))),
    }
    .map_err(|e| fail(train_error_code(&e), e))?;
    ensure_dir(&args.out)?;
    write_pipeline_output(&out, &args.out).map_err(|e| fail(train_error_code(&e), e))?;
    let manifest = RunManifest::new(
        format!("train-ssr --paradigm {}", args.paradigm),
        serde_json::to_value(&cfg).expect("config serializes"),
        cfg.seed,
    )
    .with_outputs(
        out.checkpoints
            .keys()
            .map(|k| args.out.join(format!("{k}.abck")).display().to_string())
            .collect(),
    );
    manifest.write(&args.out).map_err(|e| fail(EXIT_IO, e))?;
    if let Some(last_stage) = out.metrics.last().map(|m| m.stage.clone()) {
        for row in out.metrics.iter().filter(|m| m.stage == last_stage) {
            eprintln!(
                "{} {} {}: acc {:.4} loss {:.4}",
                row.paradigm, row.stage, row.domain, row.accuracy, row.loss
            );
        }
    }
    Ok(())
}

fn cmd_grpo(args: GrpoArgs) -> Result<(), u8> {
    let mut cfg: GrpoConfig = read_config(&args.config)?.unwrap_or_default();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let Some(env) = make_env(&args.env, 4) else {
        return Err(fail(EXIT_USAGE, format!("unknown env {:?}", args.env)));
    };
    let policy = policy_model(cfg.seed);
    let (tuned, curve) = grpo_train(&policy, env.as_ref(), &cfg).map_err(|e| {
        let code = match e {
            GrpoError::Diverged { .. } | GrpoError::NonFiniteReward(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        fail(code, e)
    })?;
    ensure_dir(&args.out)?;
    write_checkpoint(&tuned.params, args.out.join("policy.abck"))
        .map_err(|e| fail(ckpt_error_code(&e), e))?;
    let mut lines = String::new();
    for (step, reward) in curve.iter().enumerate() {
        lines.push_str(&format!(
            "{}\n",
            serde_json::json!({"step": step, "mean_reward": reward})
        ));
    }
    std::fs::write(args.out.join("reward_curve.jsonl"), lines).map_err(|e| fail(EXIT_IO, e))?;
    RunManifest::new(
        format!("grpo --env {}", args.env),
        serde_json::to_value(&cfg).expect("config serializes"),
        cfg.seed,
    )
    .with_outputs(vec![args.out.join("policy.abck").display().to_string()])
    .write(&args.out)
    .map_err(|e| fail(EXIT_IO, e))?;
    eprintln!(
        "{}: trained {} steps; final mean reward {:.4}",
        args.env,
        curve.len(),
        curve.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), u8> {
    ensure_dir(&args.out)?;
    match args.mode.as_str() {
        "bound" => {
            let spec: BoundSpec = read_config(&args.spec)?.unwrap_or_default();
            let report = verify_bound_quadratic(&spec, args.seed);
            write_json(&args.out.join("bound_report.json"), &report)?;
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            eprintln!(
                "{verdict}: {} trials, worst slack {:.3e} (threshold -1e-9), {:.2}s",
                report.trials, report.worst_slack, report.elapsed_secs
            );
            RunManifest::new(
                "diagnose --mode bound",
                serde_json::to_value(&spec).expect("spec serializes"),
                args.seed,
            )
            .write(&args.out)
            .map_err(|e| fail(EXIT_IO, e))?;
            if !report.passed() {
                return Err(EXIT_NUMERIC);
            }
        }
        "conflict" => {
            // Cross-domain gradient cosines at the shared seeded init.
            let suite = make_synthetic_domains(args.seed, &Default::default());
            let model = ToyModel::init(abm_core::model::ModelConfig {
                seed: args.seed,
                ..Default::default()
            });
            let sets: Vec<TrainSet> = suite
                .values()
                .map(|d| TrainSet::from_dataset(&d.train.take(64)))
                .collect();
            let models: Vec<&ToyModel> = sets.iter().map(|_| &model).collect();
            let refs: Vec<&TrainSet> = sets.iter().collect();
            let report = gradient_conflict_matrix(&models, &refs)
                .map_err(|e| fail(train_error_code(&e), e))?;
            write_json(&args.out.join("conflict_matrix.json"), &report)?;
            eprintln!("domains: {:?}", suite.keys().collect::<Vec<_>>());
            for row in &report.cosines {
                eprintln!(
                    "  {}",
                    row.iter()
                        .map(|c| format!("{c:+.3}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
            RunManifest::new("diagnose --mode conflict", serde_json::json!({}), args.seed)
                .write(&args.out)
                .map_err(|e| fail(EXIT_IO, e))?;
        }
        "transfer" => {
            let spec: TransferExperimentSpec = read_config(&args.spec)?.unwrap_or_default();
            let report =
                scaffold_transfer_experiment(&spec, args.seed).map_err(|e| fail(EXIT_STAGE, e))?;
            write_json(&args.out.join("transfer_report.json"), &report)?;
            eprintln!(
                "scaffold risk {:.4} (eval noise {:.4}); origin gap {:+.4}",
                report.scaffold_risk, report.eval_noise, report.origin_gap
            );
            eprintln!(
                "spearman(delta, risk) = {:.3}; spearman(eps_g, risk) = {:.3}",
                report.spearman_delta, report.spearman_eps
            );
            eprintln!(
                "fitted C_m {:.4}, eps_m {:.4}, residual {:.4}, L_g {:.3}",
                report.fitted_cm, report.fitted_eps_m, report.fit_residual, report.lipschitz_estimate
            );
            RunManifest::new(
                "diagnose --mode transfer",
                serde_json::to_value(&spec).expect("spec serializes"),
                args.seed,
            )
            .write(&args.out)
            .map_err(|e| fail(EXIT_IO, e))?;
        }
        other => return Err(fail(EXIT_USAGE, format!("unknown mode {other:?}"))),
    }
    Ok(())
}
