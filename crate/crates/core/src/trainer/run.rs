use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{parse_metrics, render_metrics, MetricRow, Split};
use super::optim::{adamw_step, clip_grad_norm, lr_at, AdamState, TrainConfig};
use crate::backbone::{Checkpoint, Model, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor};
use crate::tasks::{corpus_windows, count_correct, Corpus, MqarSpec, TaskSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.cqkl";
pub const FINAL_CHECKPOINT: &str = "final.cqkl";

/// Fraction of a corpus held out for evaluation, when it is long enough.
const CORPUS_EVAL_FRACTION: f64 = 0.1;

enum Data {
    Mqar { spec: MqarSpec, eval: Vec<TokenBatch> },
    Corpus { train: Corpus, seq_len: usize, seed: u64, eval: Vec<TokenBatch> },
}

impl Data {
    fn new(task: &TaskSpec, config: &TrainConfig) -> Result<Self> {
        match task {
            TaskSpec::Mqar(spec) => {
                let eval = spec.eval_set(config.eval_sequences, config.batch_size)?;
                Ok(Data::Mqar { spec: spec.clone(), eval: eval.iter().map(TokenBatch::trimmed).collect() })
            }
            TaskSpec::Corpus { path, seq_len } => {
                let all = Corpus::load(path)?;
                let held = (all.len() as f64 * CORPUS_EVAL_FRACTION) as usize;
                let (train, eval_src) = if held > *seq_len && all.len() - held > *seq_len {
                    let cut = all.len() - held;
                    (Corpus::new(all.bytes()[..cut].to_vec()), Corpus::new(all.bytes()[cut..].to_vec()))
                } else {
                    (all.clone(), all)
                };
                let mut rng = Rng::new(config.seed).derive("corpus.eval");
                let mut eval = Vec::new();
                let mut left = config.eval_sequences;
                while left > 0 {
                    let n = left.min(config.batch_size);
                    eval.push(corpus_windows(&eval_src, *seq_len, n, &mut rng)?);
                    left -= n;
                }
                Ok(Data::Corpus { train, seq_len: *seq_len, seed: config.seed, eval })
            }
        }
    }

    /// Batch consumed by update `index` (0-based).
    fn train_batch(&self, index: usize, batch_size: usize) -> Result<TokenBatch> {
        match self {
            Data::Mqar { spec, .. } => Ok(spec.train_batch(index as u64, batch_size)?.trimmed()),
            Data::Corpus { train, seq_len, seed, .. } => {
                corpus_windows(train, *seq_len, batch_size, &mut Rng::new(*seed).derive_indexed("corpus.train", index as u64))
            }
        }
    }

    fn eval(&self) -> &[TokenBatch] {
        match self {
            Data::Mqar { eval, .. } | Data::Corpus { eval, .. } => eval,
        }
    }

    fn reports_accuracy(&self) -> bool {
        matches!(self, Data::Mqar { .. })
    }
}

/// Run metadata carried in a checkpoint's JSON header.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    task: TaskSpec,
    train: TrainConfig,
    step: usize,
    adam_step: u64,
    metrics_csv: String,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Where and how often a run writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory receiving metrics and checkpoints; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
}

/// Summary of a finished (or interrupted) run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub step: usize,
    pub final_eval: Option<MetricRow>,
}

/// Model, optimizer state, data source and metric history for one run.
pub struct Trainer {
    model: Model,
    task: TaskSpec,
    config: TrainConfig,
    adam: AdamState,
    step: usize,
    metrics: Vec<MetricRow>,
    data: Data,
    decay: Vec<bool>,
}

impl Trainer {
    pub fn new(model: Model, task: TaskSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mc = model.config();
        if task.vocab_size() > mc.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} exceeds model vocabulary {}",
                task.vocab_size(),
                mc.vocab_size
            )));
        }
        if task.seq_len() > mc.max_seq_len {
            return Err(Error::Config(format!(
                "task sequences of {} tokens exceed max_seq_len {}",
                task.seq_len(),
                mc.max_seq_len
            )));
        }
        if let TaskSpec::Mqar(spec) = &task {
            spec.validate()?;
        }
        let data = Data::new(&task, &config)?;
        let adam = AdamState::new(model.params());
        let decay = model.layout().specs.iter().map(|s| s.decay).collect();
        Ok(Trainer { model, task, config, adam, step: 0, metrics: Vec::new(), data, decay })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint lacks training state: {e}")))?;
        let model = ck.to_model()?;
        let mut t = Trainer::new(model, meta.task, meta.train)?;
        let moments = |prefix: &str| -> Result<Vec<Tensor>> {
            t.model
                .layout()
                .specs
                .iter()
                .map(|s| {
                    ck.record(&format!("{prefix}{}", s.name))
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("checkpoint is missing {prefix}{}", s.name)))
                })
                .collect()
        };
        let (m, v) = (moments(M_PREFIX)?, moments(V_PREFIX)?);
        t.adam = AdamState { step: meta.adam_step, m, v };
        t.step = meta.step;
        t.metrics = parse_metrics(&meta.metrics_csv)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        let names: Vec<String> = self.model.layout().specs.iter().map(|s| s.name.clone()).collect();
        for (prefix, moments) in [(M_PREFIX, &self.adam.m), (V_PREFIX, &self.adam.v)] {
            for (n, t) in names.iter().zip(moments) {
                ck.records.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        ck.meta = serde_json::to_value(TrainMeta {
            task: self.task.clone(),
            train: self.config.clone(),
            step: self.step,
            adam_step: self.adam.step,
            metrics_csv: self.metrics_csv(),
        })?;
        Ok(ck)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn metrics_csv(&self) -> String {
        render_metrics(&self.metrics)
    }

    /// Mean loss and (for MQAR) accuracy over the held-out set.
    pub fn evaluate(&self) -> Result<(f64, Option<f64>)> {
        evaluate_batches(&self.model, self.data.eval(), self.data.reports_accuracy())
    }

    /// Run until `total_steps`.
    pub fn run(&mut self, opts: &TrainOptions, on_row: &mut dyn FnMut(&MetricRow)) -> Result<TrainOutcome> {
        self.run_until(self.config.total_steps, opts, on_row)
    }

    /// Run updates until `self.step() == stop` (clamped to `total_steps`).
    pub fn run_until(
        &mut self,
        stop: usize,
        opts: &TrainOptions,
        on_row: &mut dyn FnMut(&MetricRow),
    ) -> Result<TrainOutcome> {
        let stop = stop.min(self.config.total_steps);
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.step < stop {
            let t = self.step + 1;
            let batch = self.data.train_batch(self.step, self.config.batch_size)?;
            let row = match self.update(t, &batch) {
                Ok(row) => row,
                Err(e @ Error::NonFinite { .. }) => {
                    let dump = opts.out_dir.as_deref().map(|d| dump_batch(d, t, &batch, &e)).transpose()?;
                    return Err(Error::Diverged { step: t, reason: e.to_string(), dump });
                }
                Err(e) => return Err(e),
            };
            on_row(&row);
            self.metrics.push(row);
            self.step = t;
            if t.is_multiple_of(self.config.eval_every) || t == self.config.total_steps {
                let (loss, accuracy) = self.evaluate()?;
                let row = MetricRow { step: t, split: Split::Eval, loss, accuracy, lr: row.lr, grad_norm: None };
                on_row(&row);
                self.metrics.push(row);
                if let Some(dir) = &opts.out_dir {
                    self.write_artifacts(dir, t == self.config.total_steps)?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            write_file(&dir.join(METRICS_FILE), self.metrics_csv().as_bytes())?;
        }
        let final_eval = self.metrics.iter().rev().find(|r| r.split == Split::Eval).copied();
        Ok(TrainOutcome { step: self.step, final_eval })
    }

    fn update(&mut self, t: usize, batch: &TokenBatch) -> Result<MetricRow> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true)?;
        let (loss, fwd) = self.model.loss(&mut g, &vars, batch)?;
        let loss_value = g.value(loss).item()?;
        let accuracy = if self.data.reports_accuracy() {
            let (c, n) = count_correct(g.value(fwd.logits), batch)?;
            Some(c as f64 / n as f64)
        } else {
            None
        };
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = vars
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(g);
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "clip_grad_norm" });
        }
        let lr = lr_at(t, &self.config)?;
        adamw_step(self.model.params_mut(), &grads, &self.decay, &mut self.adam, lr, &self.config)?;
        Ok(MetricRow { step: t, split: Split::Train, loss: loss_value, accuracy, lr, grad_norm: Some(grad_norm) })
    }

    fn write_artifacts(&self, dir: &Path, last: bool) -> Result<()> {
        write_file(&dir.join(METRICS_FILE), self.metrics_csv().as_bytes())?;
        let ck = self.checkpoint()?;
        ck.save(&dir.join(LATEST_CHECKPOINT))?;
        if last {
            ck.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }
}

/// Mean per-batch-weighted loss and accuracy of `model` over `batches`.
pub fn evaluate_batches(model: &Model, batches: &[TokenBatch], with_accuracy: bool) -> Result<(f64, Option<f64>)> {
    let (mut loss_sum, mut weight, mut correct, mut total) = (0.0, 0usize, 0usize, 0usize);
    for batch in batches {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false)?;
        let (loss, fwd) = model.loss(&mut g, &vars, batch)?;
        let n = batch.masked_count();
        loss_sum += g.value(loss).item()? * n as f64;
        weight += n;
        if with_accuracy {
            let (c, m) = count_correct(g.value(fwd.logits), batch)?;
            correct += c;
            total += m;
        }
    }
    if weight == 0 {
        return Err(Error::InvalidArgument("evaluation set has no scored positions".into()));
    }
    Ok((loss_sum / weight as f64, with_accuracy.then(|| correct as f64 / total as f64)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: usize,
    error: String,
    batch: usize,
    seq: usize,
    tokens: &'a [usize],
    targets: &'a [usize],
    mask: &'a [bool],
}

fn dump_batch(dir: &Path, step: usize, batch: &TokenBatch, err: &Error) -> Result<PathBuf> {
    let path = dir.join(format!("diverged_step{step}.json"));
    let dump = BatchDump {
        step,
        error: err.to_string(),
        batch: batch.batch,
        seq: batch.seq,
        tokens: &batch.tokens,
        targets: &batch.targets,
        mask: &batch.mask,
    };
    write_file(&path, &serde_json::to_vec_pretty(&dump)?)?;
    Ok(path)
}

/// Train `model` on `task` for `config.total_steps` updates.
pub fn train(model: Model, task: TaskSpec, config: TrainConfig, opts: &TrainOptions) -> Result<(Trainer, TrainOutcome)> {
    let mut trainer = Trainer::new(model, task, config)?;
    let outcome = trainer.run(opts, &mut |_| {})?;
    Ok((trainer, outcome))
}
