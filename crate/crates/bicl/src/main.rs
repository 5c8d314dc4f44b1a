use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bicl::checkpoint::{Checkpoint, ModelSpec};
use bicl::config::ExperimentConfig;
use bicl::data::{data_root, load_splits};
use bicl::experiment::RunOutcome;
use bicl::grid::{cells, persist, run_cells};
use bicl::output::emit_sample_grid;
use bicl::verify::Suite;
use bicl_core::rng::Rng;
use clap::{Parser, Subcommand};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "bicl", version, about = "Bilevel continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the config's method for each of its seeds.
    Run {
        config: PathBuf,
        /// `--key=value` overrides, applied after the file.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the method × memory × seed grid in parallel.
    Grid {
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run an oracle suite: hypergrad, theorem1, reservoir, metrics or all.
    Verify { suite: String },
    /// Decode prior samples of a VAE checkpoint into a P5 graymap grid.
    SampleGrid {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value = "samples.pgm")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_grid(cfg: &ExperimentConfig, seeds: &[u64], jobs: usize) -> Result<bool> {
    let root = data_root(cfg.data_root.as_deref());
    let data = load_splits(&root, &cfg.dataset)?;
    let cells = cells(cfg, seeds);
    eprintln!("{} cell(s) on {} worker(s), config {}", cells.len(), jobs.min(cells.len()), &cfg.hash()[..12]);
    let results = run_cells(cfg, &data, &cells, jobs, |cell, r| match r {
        Ok(o) => eprintln!(
            "done {} memory={} seed={}: LA={:.4} RA={:.4} BTI={:.4} ({:.1}s)",
            cell.method, cell.memory, cell.seed, o.record.la, o.record.ra, o.record.bti, o.record.wall_clock_secs
        ),
        Err(e) => eprintln!("FAILED {} memory={} seed={}: {e:#}", cell.method, cell.memory, cell.seed),
    });
    let ok: Vec<&RunOutcome> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let files = persist(cfg, &ok)?;
    eprintln!("wrote {} file(s) under {}", files.len(), cfg.output_dir.display());
    Ok(ok.len() == results.len())
}

fn jobs(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn main_result() -> Result<bool> {
    match Cli::parse().command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let seeds = cfg.seeds.clone();
            run_grid(&ExperimentConfig { grid_methods: vec![], grid_memories: vec![], ..cfg }, &seeds, 1)
        }
        Command::Grid { config, seeds, jobs: j, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            run_grid(&cfg, &seeds, jobs(j))
        }
        Command::Verify { suite } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![Suite::parse(&suite).with_context(|| format!("unknown suite {suite:?}"))?]
            };
            let mut ok = true;
            for s in suites {
                println!("== {}", s.name());
                for c in s.run() {
                    println!("{c}");
                    ok &= c.pass;
                }
            }
            Ok(ok)
        }
        Command::SampleGrid { checkpoint, rows, cols, out, seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ModelSpec::Vae(vae) = &ck.model else {
                bail!("{} holds a classifier, not a VAE", checkpoint.display());
            };
            let img = emit_sample_grid(vae, &ck.params, rows, cols, &out, &mut Rng::seed_from_u64(seed))?;
            println!("wrote {} ({}x{})", out.display(), img.width, img.height);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match main_result() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
