//! Run configuration: a strict JSON schema, flag overrides, and the fully
//! resolved form archived as `config.json`.

use std::path::{Path, PathBuf};

use cqk_core::attention::{AttentionVariant, VariantKind};
use cqk_core::backbone::{ModelConfig, Positional, Preset};
use cqk_core::tasks::TaskSpec;
use cqk_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::Failure;

pub const CONFIG_FILE: &str = "config.json";

/// Preset used when neither a preset nor an explicit model is given.
pub const DEFAULT_PRESET: Preset = Preset::Micro;

/// What a user may write. Every field is optional; `task` is required after
/// flags are merged.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub preset: Option<Preset>,
    pub model: Option<ModelConfig>,
    /// Variant name or a full variant object.
    pub variant: Option<Value>,
    pub positional: Option<Positional>,
    /// `mqar:easy`-style string or a full task object.
    pub task: Option<Value>,
    /// Partial optimizer settings merged over the defaults.
    pub train: Option<Map<String, Value>>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub variant: Option<VariantKind>,
    pub n_steps: Option<usize>,
    pub gqa_group: Option<usize>,
    pub dt_init: Option<f64>,
    pub positional: Option<Positional>,
    pub task: Option<String>,
    pub total_steps: Option<usize>,
    pub lr_peak: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_sequences: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved run; serializing and re-reading it reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Drives parameter init, batch order and task sampling.
    pub seed: u64,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }
}

pub fn read_raw(path: &Path) -> Result<RawConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
}

pub fn parse_task(s: &str) -> Result<TaskSpec, Failure> {
    s.parse().map_err(|e| Failure::usage(format!("task: {e}")))
}

fn task_from_value(v: Value) -> Result<TaskSpec, Failure> {
    match v {
        Value::String(s) => parse_task(&s),
        other => serde_json::from_value(other).map_err(|e| Failure::usage(format!("task: {e}"))),
    }
}

fn variant_from_value(v: Value) -> Result<AttentionVariant, Failure> {
    match v {
        Value::String(s) => {
            let kind: VariantKind = s.parse().map_err(|e| Failure::usage(format!("variant: {e}")))?;
            Ok(AttentionVariant::new(kind))
        }
        other => serde_json::from_value(other).map_err(|e| Failure::usage(format!("variant: {e}"))),
    }
}

fn train_from_map(map: Map<String, Value>, o: &Overrides) -> Result<TrainConfig, Failure> {
    let Value::Object(mut merged) = serde_json::to_value(TrainConfig::default()).expect("train config serializes") else {
        unreachable!("train config is a JSON object")
    };
    merged.extend(map);
    let mut train: TrainConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::usage(format!("train: {e}")))?;
    if let Some(v) = o.total_steps {
        train.total_steps = v;
    }
    if let Some(v) = o.lr_peak {
        train.lr_peak = v;
    }
    if let Some(v) = o.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = o.warmup_steps {
        train.warmup_steps = v;
    }
    if let Some(v) = o.eval_every {
        train.eval_every = v;
    }
    if let Some(v) = o.eval_sequences {
        train.eval_sequences = v;
    }
    Ok(train)
}

/// Merge flags over the file and validate the result.
pub fn resolve(raw: RawConfig, o: &Overrides) -> Result<RunConfig, Failure> {
    let mut model = match (o.preset, raw.preset, raw.model) {
        (Some(p), _, _) => ModelConfig::preset(p, AttentionVariant::standard()),
        (None, Some(_), Some(_)) => return Err(Failure::usage("config sets both `preset` and `model`; choose one")),
        (None, Some(p), None) => ModelConfig::preset(p, AttentionVariant::standard()),
        (None, None, Some(m)) => m,
        (None, None, None) => ModelConfig::preset(DEFAULT_PRESET, AttentionVariant::standard()),
    };
    match (o.variant, raw.variant) {
        (Some(kind), _) => model.variant = AttentionVariant::new(kind),
        (None, Some(v)) => model.variant = variant_from_value(v)?,
        (None, None) => {}
    }
    if let Some(n) = o.n_steps {
        model.variant.n_steps = n;
    }
    if let Some(g) = o.gqa_group {
        model.variant.gqa_group = g;
    }
    if let Some(dt) = o.dt_init {
        model.variant.dt_init = dt;
    }
    if let Some(p) = o.positional.or(raw.positional) {
        model.positional = p;
    }
    model.validate().map_err(|e| Failure::usage(format!("model: {e}")))?;

    let task = match (&o.task, raw.task) {
        (Some(s), _) => parse_task(s)?,
        (None, Some(v)) => task_from_value(v)?,
        (None, None) => {
            return Err(Failure::usage("missing required field `task` (set it in the config or pass --task)"))
        }
    };

    let map = raw.train.unwrap_or_default();
    let file_train_seed = map.get("seed").and_then(Value::as_u64);
    let mut train = train_from_map(map, o)?;
    let seed = o.seed.or(raw.seed).or(file_train_seed).unwrap_or(0);
    train.seed = seed;
    train.validate().map_err(|e| Failure::usage(format!("train: {e}")))?;
    let task = task.with_seed(seed);
    check_task_fits(&model, &task)?;

    let out_dir = o
        .out_dir
        .clone()
        .or(raw.out_dir)
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_s{seed}", model.variant.kind)));
    Ok(RunConfig { model, task, train, out_dir, seed })
}

pub fn check_task_fits(model: &ModelConfig, task: &TaskSpec) -> Result<(), Failure> {
    if task.vocab_size() > model.vocab_size {
        return Err(Failure::usage(format!(
            "task vocabulary {} exceeds model vocabulary {}",
            task.vocab_size(),
            model.vocab_size
        )));
    }
    if task.seq_len() > model.max_seq_len {
        return Err(Failure::usage(format!(
            "task sequences of {} tokens exceed the model's max_seq_len {}",
            task.seq_len(),
            model.max_seq_len
        )));
    }
    if let TaskSpec::Mqar(spec) = task {
        spec.validate().map_err(|e| Failure::usage(format!("task: {e}")))?;
    }
    Ok(())
}
