//! Deterministic training: AdamW with decoupled decay, warmup plus cosine
//! schedule, global-norm clipping, periodic evaluation and resumable
//! checkpoints.
//!
//! Update `t` (1-based) consumes batch `t − 1` of the task stream and uses
//! `lr_at(t)`. Batches depend only on `(task, seed, t)`, so a run resumed
//! from a checkpoint replays exactly the same data.

mod metrics;
mod optim;
mod run;

pub use metrics::{parse_metrics, render_metrics, MetricRow, Split, METRICS_HEADER};
pub use optim::{adamw_step, clip_grad_norm, lr_at, AdamState, TrainConfig};
pub use run::{
    evaluate_batches, train, TrainOptions, TrainOutcome, Trainer, FINAL_CHECKPOINT, LATEST_CHECKPOINT, METRICS_FILE,
};
