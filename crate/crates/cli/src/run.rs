//! `train` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cqk_core::backbone::{Checkpoint, Model};
use cqk_core::tasks::TaskSpec;
use cqk_core::trainer::{MetricRow, Split, TrainConfig, TrainOptions, Trainer, LATEST_CHECKPOINT};
use cqk_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{check_task_fits, parse_task, read_raw, resolve, Overrides, RawConfig, RunConfig, CONFIG_FILE};
use crate::failure::{io, Failure};

pub const SUMMARY_FILE: &str = "summary.json";

/// Final state of a run, written last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `completed` or `diverged`.
    pub status: String,
    pub steps: usize,
    pub params: usize,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub error: Option<String>,
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub force: bool,
    pub resume: bool,
}

fn is_empty_dir(dir: &Path) -> Result<bool, Failure> {
    Ok(fs::read_dir(dir).map_err(|e| io(dir, e))?.next().is_none())
}

/// Refuse to reuse a populated directory unless it is a run directory and
/// `force` is set.
fn claim_run_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() && !is_empty_dir(dir)? {
        if !force {
            return Err(Failure::usage(format!(
                "run directory {} already exists; choose a fresh directory or pass --force",
                dir.display()
            )));
        }
        if !dir.join(CONFIG_FILE).is_file() {
            return Err(Failure::usage(format!(
                "--force only replaces run directories (no {CONFIG_FILE} in {})",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::failed(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

fn log_row(row: &MetricRow) {
    if row.split == Split::Eval {
        let acc = row.accuracy.map(|a| format!(" acc {a:.4}")).unwrap_or_default();
        eprintln!("step {:>6}  eval loss {:.4}{acc}", row.step, row.loss);
    }
}

pub fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let raw = match (&args.config, &args.overrides.out_dir) {
        (Some(p), _) => read_raw(p)?,
        (None, Some(dir)) if args.resume => read_raw(&dir.join(CONFIG_FILE))?,
        (None, _) if args.resume => return Err(Failure::usage("--resume needs --out or --config naming the run")),
        (None, _) => RawConfig::default(),
    };
    let config = resolve(raw, &args.overrides)?;
    let dir = config.out_dir.clone();

    let mut trainer = if args.resume {
        if load_run_config(&dir)? != config {
            return Err(Failure::usage(format!("--resume: configuration differs from {}", dir.join(CONFIG_FILE).display())));
        }
        let ck = Checkpoint::load(&dir.join(LATEST_CHECKPOINT))?;
        let t = Trainer::resume(&ck)?;
        eprintln!("resuming {} at step {}", dir.display(), t.step());
        t
    } else {
        claim_run_dir(&dir, args.force)?;
        fs::write(dir.join(CONFIG_FILE), config.to_json()).map_err(|e| io(&dir, e))?;
        let model = Model::new(config.model.clone(), config.seed)?;
        Trainer::new(model, config.task.clone(), config.train.clone())?
    };

    let params = trainer.model().num_params();
    eprintln!(
        "training {} on {} for {} steps ({params} parameters) -> {}",
        config.model.variant.label(),
        config.task.label(),
        config.train.total_steps,
        dir.display()
    );
    let start = Instant::now();
    let opts = TrainOptions { out_dir: Some(dir.clone()) };
    let outcome = trainer.run(&opts, &mut log_row);
    let summary = match &outcome {
        Ok(o) => RunSummary {
            status: "completed".into(),
            steps: o.step,
            params,
            final_loss: o.final_eval.map(|r| r.loss),
            final_accuracy: o.final_eval.and_then(|r| r.accuracy),
            error: None,
        },
        Err(Error::Diverged { step, .. }) => RunSummary {
            status: "diverged".into(),
            steps: step.saturating_sub(1),
            params,
            final_loss: None,
            final_accuracy: None,
            error: outcome.as_ref().err().map(ToString::to_string),
        },
        Err(_) => return outcome.map(|_| ()).map_err(Failure::from),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    outcome?;
    eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());
    println!("{}", dir.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub task: Option<String>,
    pub eval_sequences: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct EvalResult {
    loss: f64,
    accuracy: Option<f64>,
    sequences: usize,
    task: String,
}

/// Task and optimizer settings archived in a training checkpoint, if any.
pub fn checkpoint_training(ck: &Checkpoint) -> (Option<TaskSpec>, Option<TrainConfig>) {
    let field = |k: &str| ck.meta.get(k).cloned();
    (
        field("task").and_then(|v| serde_json::from_value(v).ok()),
        field("train").and_then(|v| serde_json::from_value(v).ok()),
    )
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (ck_task, ck_train) = checkpoint_training(&ck);
    let mut train = ck_train.unwrap_or_default();
    let seed = args.seed.unwrap_or(train.seed);
    let task = match (&args.task, ck_task) {
        (Some(s), _) => parse_task(s)?.with_seed(seed),
        (None, Some(t)) => t,
        (None, None) => return Err(Failure::usage("checkpoint records no task; pass --task")),
    };
    if let Some(n) = args.eval_sequences {
        train.eval_sequences = n;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    check_task_fits(&ck.config, &task)?;
    let trainer = Trainer::new(ck.to_model()?, task.clone(), train)?;
    let (loss, accuracy) = trainer.evaluate()?;
    let result = EvalResult { loss, accuracy, sequences: trainer.config().eval_sequences, task: task.label() };
    println!("{}", serde_json::to_string(&result).map_err(|e| Failure::failed(e.to_string()))?);
    Ok(())
}

/// The archived configuration of a run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig, Failure> {
    resolve(read_raw(&dir.join(CONFIG_FILE))?, &Overrides { out_dir: Some(dir.to_path_buf()), ..Overrides::default() })
}
