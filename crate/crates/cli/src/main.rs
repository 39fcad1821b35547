//! `cqk`: train, evaluate, verify and analyze coupled query-key attention
//! models. Exit codes: 0 success, 1 failed property or runtime fault,
//! 2 usage or configuration error.

mod ablate;
mod config;
mod failure;
mod inspect;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cqk_core::attention::VariantKind;
use cqk_core::backbone::{Positional, Preset};
use cqk_core::diagnostics::{AnalyzeOptions, VerifyOptions};

use crate::config::Overrides;
use crate::failure::Failure;
use crate::inspect::{DataSplit, ModelSpec};

#[derive(Parser)]
#[command(name = "cqk", version, about = "Coupled query-key dynamics attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes config.json, metrics.csv, checkpoints and summary.json.
    Train(TrainCmd),
    /// Evaluate a checkpoint on its held-out set.
    Eval(EvalCmd),
    /// Run the invariant suite; exit 1 if any check fails.
    Verify(VerifyCmd),
    /// Entropy, effective rank, Jacobian determinants and attention dumps.
    Analyze(AnalyzeCmd),
    /// Run a variants × n_steps × seeds grid and summarize it.
    Ablate(AblateCmd),
    /// Dump MQAR sequences as JSON lines.
    MqarGen(MqarGenCmd),
    /// Print the parameter ledger.
    Params(ParamsCmd),
}

#[derive(Args, Clone, Default)]
struct ArchFlags {
    /// Named model size (nano, micro, small).
    #[arg(long)]
    preset: Option<Preset>,
    /// Attention variant.
    #[arg(long)]
    variant: Option<VariantKind>,
    /// Integration steps for coupled variants.
    #[arg(long)]
    n_steps: Option<usize>,
    /// Query heads per key/value head for gqa.
    #[arg(long)]
    gqa_group: Option<usize>,
    /// Initial integration step for coupled variants.
    #[arg(long)]
    dt_init: Option<f64>,
    /// Position encoding (learned, rope).
    #[arg(long)]
    positional: Option<Positional>,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// mqar:easy | mqar:medium | mqar:hard | corpus:PATH
    #[arg(long)]
    task: Option<String>,
    /// Total optimizer updates.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_sequences: Option<usize>,
}

fn overrides(arch: &ArchFlags, run: &RunFlags, seed: Option<u64>, out: Option<PathBuf>) -> Overrides {
    Overrides {
        preset: arch.preset,
        variant: arch.variant,
        n_steps: arch.n_steps,
        gqa_group: arch.gqa_group,
        dt_init: arch.dt_init,
        positional: arch.positional,
        task: run.task.clone(),
        total_steps: run.steps,
        lr_peak: run.lr,
        batch_size: run.batch_size,
        warmup_steps: run.warmup,
        eval_every: run.eval_every,
        eval_sequences: run.eval_sequences,
        seed,
        out_dir: out,
    }
}

#[derive(Args)]
struct TrainCmd {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchFlags,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default runs/<variant>_s<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the task recorded in the checkpoint.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    eval_sequences: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyCmd {
    /// Skip the finite-difference gradient checks.
    #[arg(long)]
    skip_grad: bool,
    /// Fault injection: treat forward Euler as volume preserving.
    #[arg(long)]
    tamper_euler: bool,
}

#[derive(Args)]
struct AnalyzeCmd {
    /// Checkpoint to analyze; a freshly initialized model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "micro")]
    preset: Preset,
    #[arg(long, default_value = "standard")]
    variant: VariantKind,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    gqa_group: Option<usize>,
    #[arg(long)]
    positional: Option<Positional>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the checkpoint's task, else mqar:easy.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 25)]
    batches: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Layers to dump, comma separated (default all).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Heads to dump, comma separated (default all).
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    #[arg(long, default_value_t = AnalyzeOptions::default().det_samples)]
    det_samples: usize,
    #[arg(long, default_value_t = AnalyzeOptions::default().energy_steps)]
    energy_steps: usize,
    #[arg(long, default_value_t = AnalyzeOptions::default().energy_dt)]
    energy_dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateCmd {
    /// Base run configuration applied to every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON grid {"variants": [...], "n_steps": [...], "seeds": [...]}.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<VariantKind>>,
    #[arg(long, value_delimiter = ',')]
    n_steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    gqa_group: Option<usize>,
    #[arg(long)]
    positional: Option<Positional>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent worker processes (also capped by CQK_THREADS).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Replace an existing ablation directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MqarGenCmd {
    #[arg(long, default_value = "mqar:easy")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: DataSplit,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsCmd {
    #[arg(long, default_value = "small")]
    preset: Preset,
    /// Variants to list, comma separated (default all).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<VariantKind>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    gqa_group: Option<usize>,
    #[arg(long)]
    json: bool,
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train(c) => run::cmd_train(run::TrainArgs {
            overrides: overrides(&c.arch, &c.run, c.seed, c.out),
            config: c.config,
            force: c.force,
            resume: c.resume,
        }),
        Cmd::Eval(c) => run::cmd_eval(run::EvalArgs {
            checkpoint: c.checkpoint,
            task: c.task,
            eval_sequences: c.eval_sequences,
            batch_size: c.batch_size,
            seed: c.seed,
        }),
        Cmd::Verify(c) => {
            inspect::cmd_verify(VerifyOptions { skip_grad_checks: c.skip_grad, claim_euler_symplectic: c.tamper_euler })
        }
        Cmd::Analyze(c) => inspect::cmd_analyze(inspect::AnalyzeArgs {
            checkpoint: c.checkpoint,
            model: ModelSpec {
                preset: c.preset,
                variant: c.variant,
                n_steps: c.n_steps,
                gqa_group: c.gqa_group,
                positional: c.positional,
            },
            seed: c.seed,
            task: c.task,
            batches: c.batches,
            batch_size: c.batch_size,
            layers: c.layers,
            heads: c.heads,
            options: AnalyzeOptions {
                det_samples: c.det_samples,
                energy_steps: c.energy_steps,
                energy_dt: c.energy_dt,
                seed: c.seed,
            },
            out: c.out,
        }),
        Cmd::Ablate(c) => {
            let arch = ArchFlags { preset: c.preset, gqa_group: c.gqa_group, positional: c.positional, ..ArchFlags::default() };
            ablate::cmd_ablate(ablate::AblateArgs {
                overrides: overrides(&arch, &c.run, None, None),
                config: c.config,
                grid_file: c.grid,
                variants: c.variants,
                n_steps: c.n_steps,
                seeds: c.seeds,
                out: c.out,
                workers: c.workers,
                force: c.force,
            })
        }
        Cmd::MqarGen(c) => inspect::cmd_mqar_gen(inspect::MqarGenArgs {
            task: c.task,
            seed: c.seed,
            split: c.split,
            batches: c.batches,
            batch_size: c.batch_size,
            out: c.out,
        }),
        Cmd::Params(c) => inspect::cmd_params(inspect::ParamsArgs {
            preset: c.preset,
            variants: c.variants,
            n_steps: c.n_steps,
            gqa_group: c.gqa_group,
            json: c.json,
        }),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
