//! `ablate`: a variants × n_steps × seeds grid of training runs executed by
//! worker processes, aggregated into mean ± std per cell group.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cqk_core::attention::VariantKind;
use serde::{Deserialize, Serialize};

use crate::config::{read_raw, resolve, Overrides, RawConfig, CONFIG_FILE};
use crate::failure::{io, Failure};
use crate::run::{RunSummary, SUMMARY_FILE};

pub const GRID_FILE: &str = "ablation.json";
pub const CELLS_CSV: &str = "cells.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
/// Environment variable capping concurrent worker processes.
pub const THREADS_ENV: &str = "CQK_THREADS";

/// Grid axes. `n_steps` applies to coupled variants only; when empty they
/// use their default step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub variants: Vec<VariantKind>,
    #[serde(default)]
    pub n_steps: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Cells sharing a variant and step count are aggregated together.
type GroupKey = (VariantKind, Option<usize>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub variant: VariantKind,
    pub n_steps: Option<usize>,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        match self.n_steps {
            Some(n) => format!("{}_n{n}_s{}", self.variant, self.seed),
            None => format!("{}_s{}", self.variant, self.seed),
        }
    }

    fn group(&self) -> GroupKey {
        (self.variant, self.n_steps)
    }
}

impl Grid {
    /// Cells in grid order: variant, then n_steps, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &variant in &self.variants {
            let steps: Vec<Option<usize>> = match variant.integrator() {
                Some(_) if !self.n_steps.is_empty() => self.n_steps.iter().copied().map(Some).collect(),
                _ => vec![None],
            };
            for n_steps in steps {
                for &seed in &self.seeds {
                    cells.push(Cell { variant, n_steps, seed });
                }
            }
        }
        cells
    }
}

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub grid_file: Option<PathBuf>,
    pub variants: Option<Vec<VariantKind>>,
    pub n_steps: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub overrides: Overrides,
    pub out: PathBuf,
    pub workers: usize,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    /// `completed`, `diverged` or `crashed`.
    pub status: String,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

fn worker_count(requested: usize, cells: usize) -> Result<usize, Failure> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Failure::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => usize::MAX,
    };
    if requested == 0 {
        return Err(Failure::usage("--workers must be positive"));
    }
    Ok(requested.min(cap).min(cells).max(1))
}

fn claim_out_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| io(dir, e))?.next().is_some() {
        if !force {
            return Err(Failure::usage(format!(
                "ablation directory {} already exists; choose a fresh directory or pass --force",
                dir.display()
            )));
        }
        if !dir.join(GRID_FILE).is_file() {
            return Err(Failure::usage(format!("--force only replaces ablation directories (no {GRID_FILE} in {})", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn run_cell(exe: &Path, config: &Path, run_dir: &Path, log: &Path) -> Result<std::process::ExitStatus, Failure> {
    let log_file = fs::File::create(log).map_err(|e| io(log, e))?;
    let err_file = log_file.try_clone().map_err(|e| io(log, e))?;
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(run_dir)
        .stdin(Stdio::null())
        .stdout(log_file)
        .stderr(err_file)
        .status()
        .map_err(|e| io(exe, e))
}

fn read_summary(dir: &Path) -> Option<RunSummary> {
    serde_json::from_slice(&fs::read(dir.join(SUMMARY_FILE)).ok()?).ok()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn render_cells(results: &[CellResult]) -> String {
    let mut out = String::from("variant,n_steps,seed,status,final_loss,final_accuracy\n");
    for r in results {
        let n = r.cell.n_steps.map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{n},{},{},{},{}",
            r.cell.variant,
            r.cell.seed,
            r.status,
            fmt_opt(r.final_loss),
            fmt_opt(r.final_accuracy)
        );
    }
    out
}

/// One row per (variant, n_steps): completed/total cells and mean ± std of
/// the final evaluation over completed cells.
pub fn render_summary(results: &[CellResult]) -> String {
    let mut groups: Vec<(GroupKey, Vec<&CellResult>)> = Vec::new();
    for r in results {
        match groups.iter_mut().find(|(k, _)| *k == r.cell.group()) {
            Some((_, v)) => v.push(r),
            None => groups.push((r.cell.group(), vec![r])),
        }
    }
    let mut out = String::from(
        "variant,n_steps,cells,completed,final_loss_mean,final_loss_std,final_accuracy_mean,final_accuracy_std,final_accuracy\n",
    );
    for ((variant, n_steps), rs) in groups {
        let done: Vec<&&CellResult> = rs.iter().filter(|r| r.status == "completed").collect();
        let loss = mean_std(&done.iter().filter_map(|r| r.final_loss).collect::<Vec<_>>());
        let acc = mean_std(&done.iter().filter_map(|r| r.final_accuracy).collect::<Vec<_>>());
        let pair = |m: Option<(f64, f64)>| m.map(|(a, b)| (format!("{a:?}"), format!("{b:?}"))).unwrap_or_default();
        let ((lm, ls), (am, as_)) = (pair(loss), pair(acc));
        let shown = acc.map(|(m, s)| format!("{m:.4} ± {s:.4}")).unwrap_or_default();
        let n = n_steps.map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{variant},{n},{},{},{lm},{ls},{am},{as_},{shown}", rs.len(), done.len());
    }
    out
}

pub fn cmd_ablate(args: AblateArgs) -> Result<(), Failure> {
    let mut grid = match &args.grid_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid grid {}: {e}", p.display())))?
        }
        None => Grid { seeds: vec![0], ..Grid::default() },
    };
    if let Some(v) = args.variants {
        grid.variants = v;
    }
    if let Some(n) = args.n_steps {
        grid.n_steps = n;
    }
    if let Some(s) = args.seeds {
        grid.seeds = s;
    }
    let mut cells = grid.cells();
    if cells.is_empty() {
        return Err(Failure::usage("empty ablation grid: give at least one variant and one seed"));
    }

    // Resolve every cell before launching anything so config errors surface
    // as usage errors.
    let base = || match &args.config {
        Some(p) => read_raw(p),
        None => Ok(RawConfig::default()),
    };
    let cells_dir = args.out.join("cells");
    let mut configs = Vec::new();
    for cell in &mut cells {
        let o = Overrides {
            variant: Some(cell.variant),
            n_steps: cell.n_steps.or(args.overrides.n_steps),
            seed: Some(cell.seed),
            out_dir: Some(cells_dir.join(cell.name())),
            ..args.overrides.clone()
        };
        let mut config = resolve(base()?, &o)?;
        // Record the step count a coupled cell actually uses.
        if cell.variant.integrator().is_some() && cell.n_steps.is_none() {
            cell.n_steps = Some(config.model.variant.n_steps);
            config.out_dir = cells_dir.join(cell.name());
        }
        configs.push(config);
    }
    let workers = worker_count(args.workers, cells.len())?;
    let exe = std::env::current_exe().map_err(|e| Failure::failed(format!("cannot locate own executable: {e}")))?;

    claim_out_dir(&args.out, args.force)?;
    let mut grid_text = serde_json::to_string_pretty(&grid).map_err(|e| Failure::failed(e.to_string()))?;
    grid_text.push('\n');
    fs::write(args.out.join(GRID_FILE), grid_text).map_err(|e| io(&args.out, e))?;
    let config_dir = args.out.join("configs");
    let log_dir = args.out.join("logs");
    for d in [&config_dir, &log_dir, &cells_dir] {
        fs::create_dir_all(d).map_err(|e| io(d, e))?;
    }
    let mut config_paths = Vec::new();
    for (cell, config) in cells.iter().zip(&configs) {
        let path = config_dir.join(format!("{}.{CONFIG_FILE}", cell.name()));
        fs::write(&path, config.to_json()).map_err(|e| io(&path, e))?;
        config_paths.push(path);
    }

    eprintln!("ablation: {} cells on {workers} worker(s) -> {}", cells.len(), args.out.display());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let run_dir = &configs[i].out_dir;
                let log = log_dir.join(format!("{}.log", cell.name()));
                let status = run_cell(&exe, &config_paths[i], run_dir, &log);
                let summary = read_summary(run_dir);
                let state = match (&status, &summary) {
                    (Ok(st), Some(sm)) if st.success() => sm.status.clone(),
                    (_, Some(sm)) if sm.status == "diverged" => sm.status.clone(),
                    _ => "crashed".to_string(),
                };
                let detail = match &status {
                    Ok(st) => st.to_string(),
                    Err(e) => e.to_string(),
                };
                eprintln!("cell {:<28} {state} ({detail})", cell.name());
                let r = CellResult {
                    cell: cell.clone(),
                    status: state,
                    final_loss: summary.as_ref().and_then(|s| s.final_loss),
                    final_accuracy: summary.as_ref().and_then(|s| s.final_accuracy),
                };
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<CellResult> = results.into_inner().expect("result lock").into_iter().flatten().collect();

    let cells_csv = args.out.join(CELLS_CSV);
    fs::write(&cells_csv, render_cells(&results)).map_err(|e| io(&cells_csv, e))?;
    let summary = render_summary(&results);
    let summary_csv = args.out.join(SUMMARY_CSV);
    fs::write(&summary_csv, &summary).map_err(|e| io(&summary_csv, e))?;
    print!("{summary}");

    let failed: Vec<String> = results.iter().filter(|r| r.status != "completed").map(|r| r.cell.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::failed(format!("{} of {} cells did not complete: {}", failed.len(), results.len(), failed.join(", "))))
    }
}
