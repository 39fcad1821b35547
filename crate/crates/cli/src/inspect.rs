//! `verify`, `analyze`, `params` and `mqar-gen`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use cqk_core::attention::{AttentionVariant, VariantKind};
use cqk_core::backbone::{count_params, Checkpoint, Model, ModelConfig, Positional, Preset, TokenBatch};
use cqk_core::diagnostics::{analyze, dump_attention, run_verify, AnalyzeOptions, VerifyOptions};
use cqk_core::numerics::Rng;
use cqk_core::tasks::{corpus_windows, Corpus, TaskSpec};
use serde::Serialize;

use crate::config::{check_task_fits, parse_task};
use crate::failure::{io, Failure};
use crate::run::checkpoint_training;

pub fn cmd_verify(opts: VerifyOptions) -> Result<(), Failure> {
    let report = run_verify(&opts, &mut |c| {
        let status = if c.passed { "PASS" } else { "FAIL" };
        eprintln!("{status}  {}  ({:.2}s)", c.name, c.seconds);
    });
    print!("{}", report.table());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        Err(Failure::failed(format!("{} of {} checks failed: {}", names.len(), report.checks.len(), names.join(", "))))
    }
}

/// Model architecture flags shared by commands that build a fresh model.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub preset: Preset,
    pub variant: VariantKind,
    pub n_steps: Option<usize>,
    pub gqa_group: Option<usize>,
    pub positional: Option<Positional>,
}

impl ModelSpec {
    pub fn config(&self) -> Result<ModelConfig, Failure> {
        let mut variant = AttentionVariant::new(self.variant);
        if let Some(n) = self.n_steps {
            variant.n_steps = n;
        }
        if let Some(g) = self.gqa_group {
            variant.gqa_group = g;
        }
        let mut config = ModelConfig::preset(self.preset, variant);
        if let Some(p) = self.positional {
            config.positional = p;
        }
        config.validate().map_err(|e| Failure::usage(format!("model: {e}")))?;
        Ok(config)
    }
}

pub struct AnalyzeArgs {
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSpec,
    pub seed: u64,
    pub task: Option<String>,
    pub batches: usize,
    pub batch_size: usize,
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub options: AnalyzeOptions,
    pub out: PathBuf,
}

/// Task used when neither the flags nor the checkpoint name one.
pub const DEFAULT_ANALYSIS_TASK: &str = "mqar:easy";

fn analysis_batches(task: &TaskSpec, batches: usize, batch_size: usize, seed: u64) -> Result<Vec<TokenBatch>, Failure> {
    match task {
        TaskSpec::Mqar(spec) => Ok(spec.eval_set(batches * batch_size, batch_size)?),
        TaskSpec::Corpus { path, seq_len } => {
            let corpus = Corpus::load(path)?;
            let rng = Rng::new(seed).derive("analyze.corpus");
            (0..batches)
                .map(|i| Ok(corpus_windows(&corpus, *seq_len, batch_size, &mut rng.derive_indexed("batch", i as u64))?))
                .collect()
        }
    }
}

fn select(requested: &Option<Vec<usize>>, available: usize, what: &str) -> Result<Vec<usize>, Failure> {
    match requested {
        None => Ok((0..available).collect()),
        Some(list) => match list.iter().find(|&&i| i >= available) {
            Some(i) => Err(Failure::usage(format!("{what} {i} out of range (model has {available})"))),
            None => Ok(list.clone()),
        },
    }
}

pub fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let (model, ck_task) = match &args.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (task, _) = checkpoint_training(&ck);
            (ck.to_model()?, task)
        }
        None => (Model::new(args.model.config()?, args.seed)?, None),
    };
    let task = match (&args.task, ck_task) {
        (Some(s), _) => parse_task(s)?.with_seed(args.seed),
        (None, Some(t)) => t,
        (None, None) => parse_task(DEFAULT_ANALYSIS_TASK)?.with_seed(args.seed),
    };
    check_task_fits(model.config(), &task)?;
    if args.batches == 0 || args.batch_size == 0 {
        return Err(Failure::usage("--batches and --batch-size must be positive"));
    }
    let layers = select(&args.layers, model.config().n_layers, "layer")?;
    let heads = select(&args.heads, model.config().n_heads, "head")?;

    let batches = analysis_batches(&task, args.batches, args.batch_size, args.seed)?;
    let (report, weights) = analyze(&model, &batches, &args.options)?;
    report.write(&args.out)?;
    let dumps = dump_attention(&weights, &layers, &heads, 0, &args.out.join("attention"))?;

    println!("layer  entropy  uniform  eff_rank");
    for (l, (h, r)) in report.layer_entropy.iter().zip(&report.layer_effective_rank).enumerate() {
        let h = h.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("{l:>5}  {h:>7}  {:>7.4}  {r:>8.3}", report.uniform_entropy);
    }
    for (name, stats) in &report.jacobian_dets {
        println!("det {name}: max |det-1| = {:.3e}", stats.max_deviation);
    }
    eprintln!("wrote report and {} attention dumps to {}", dumps.len(), args.out.display());
    Ok(())
}

pub struct ParamsArgs {
    pub preset: Preset,
    pub variants: Vec<VariantKind>,
    pub n_steps: Option<usize>,
    pub gqa_group: Option<usize>,
    pub json: bool,
}

#[derive(Serialize)]
struct LedgerLine {
    variant: String,
    total: usize,
    delta_vs_standard: i64,
    variant_specific: usize,
    components: std::collections::BTreeMap<String, usize>,
}

pub fn cmd_params(args: ParamsArgs) -> Result<(), Failure> {
    let variants = if args.variants.is_empty() { VariantKind::ALL.to_vec() } else { args.variants.clone() };
    let mut lines = Vec::new();
    for kind in variants {
        let spec = ModelSpec { preset: args.preset, variant: kind, n_steps: args.n_steps, gqa_group: args.gqa_group, positional: None };
        let config = spec.config()?;
        let ledger = count_params(&config);
        lines.push(LedgerLine {
            variant: config.variant.label(),
            total: ledger.total,
            delta_vs_standard: ledger.delta_vs_standard,
            variant_specific: ledger.variant_specific,
            components: ledger.components,
        });
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&lines).map_err(|e| Failure::failed(e.to_string()))?);
        return Ok(());
    }
    println!("preset {}", args.preset.name());
    println!("{:<24} {:>12} {:>10} {:>10}", "variant", "total", "delta", "specific");
    for l in &lines {
        println!("{:<24} {:>12} {:>+10} {:>10}", l.variant, l.total, l.delta_vs_standard, l.variant_specific);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DataSplit {
    Train,
    Eval,
}

pub struct MqarGenArgs {
    pub task: String,
    pub seed: u64,
    pub split: DataSplit,
    pub batches: usize,
    pub batch_size: usize,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SequenceLine<'a> {
    tokens: &'a [usize],
    targets: &'a [usize],
    mask: &'a [bool],
}

pub fn cmd_mqar_gen(args: MqarGenArgs) -> Result<(), Failure> {
    let TaskSpec::Mqar(spec) = parse_task(&args.task)?.with_seed(args.seed) else {
        return Err(Failure::usage(format!("mqar-gen needs an mqar task, got {}", args.task)));
    };
    spec.validate().map_err(|e| Failure::usage(format!("task: {e}")))?;
    if args.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be positive"));
    }
    let batches = match args.split {
        DataSplit::Train => (0..args.batches as u64).map(|i| spec.train_batch(i, args.batch_size)).collect::<Result<Vec<_>, _>>()?,
        DataSplit::Eval => spec.eval_set(args.batches * args.batch_size, args.batch_size)?,
    };
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    let write_err = |e: std::io::Error| Failure::failed(format!("writing sequences: {e}"));
    for b in &batches {
        for i in 0..b.batch {
            let r = i * b.seq..(i + 1) * b.seq;
            let line = SequenceLine { tokens: &b.tokens[r.clone()], targets: &b.targets[r.clone()], mask: &b.mask[r] };
            serde_json::to_writer(&mut w, &line).map_err(|e| Failure::failed(e.to_string()))?;
            w.write_all(b"\n").map_err(write_err)?;
        }
    }
    w.flush().map_err(write_err)
}
