//! Worker pool over grid cells and the coordinator that persists results.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use anyhow::Result;

use crate::config::ExperimentConfig;
use crate::data::Splits;
use crate::experiment::{run_experiment, Cell, RunOutcome, RunRecord};
use crate::output::{emit_config_echo, emit_results};

/// `methods × memories × seeds`, falling back to the config's single method
/// and memory size when the grid lists are empty.
pub fn cells(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Cell> {
    let methods = if cfg.grid_methods.is_empty() { vec![cfg.method] } else { cfg.grid_methods.clone() };
    let memories = if cfg.grid_memories.is_empty() { vec![cfg.memory_size] } else { cfg.grid_memories.clone() };
    let mut out = Vec::new();
    for &method in &methods {
        for &memory in &memories {
            for &seed in seeds {
                out.push(Cell { method, memory, seed });
            }
        }
    }
    out
}

/// Runs every cell on up to `jobs` threads; results come back in cell order.
/// `on_done` is called on the coordinating thread as cells finish.
pub fn run_cells(
    cfg: &ExperimentConfig,
    data: &Splits,
    cells: &[Cell],
    jobs: usize,
    mut on_done: impl FnMut(&Cell, &Result<RunOutcome>),
) -> Vec<Result<RunOutcome>> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunOutcome>)>();
    let mut slots: Vec<Option<Result<RunOutcome>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                if tx.send((i, run_experiment(cfg, data, cells[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            on_done(&cells[i], &r);
            slots[i] = Some(r);
        }
    });
    slots.into_iter().map(|r| r.expect("every cell reports once")).collect()
}

/// Writes CSVs, the config echo, checkpoints and sample grids for the
/// successful outcomes; returns the files written.
pub fn persist(cfg: &ExperimentConfig, outcomes: &[&RunOutcome]) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let records: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let mut files = emit_results(&records, dir)?;
    files.push(emit_config_echo(&cfg.to_text(), dir)?);
    for o in outcomes {
        let r = &o.record;
        let stem = Cell { method: r.method, memory: r.memory, seed: r.seed }.stem(cfg);
        let ck = dir.join(format!("{stem}.ckpt"));
        o.checkpoint.save(&ck)?;
        files.push(ck);
        for (t, img) in &o.grids {
            let p = dir.join(format!("{stem}_task{t}.pgm"));
            img.save(&p)?;
            files.push(p);
        }
    }
    Ok(files)
}
