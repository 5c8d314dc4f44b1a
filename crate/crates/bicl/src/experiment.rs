//! One experiment run: task construction, training, row-by-row evaluation.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use bicl_core::baselines::{self, IndependentModel};
use bicl_core::bilevel::bicl_train;
use bicl_core::continuum::{build_task, split_train_val, Continuum, ContinuumStream, Dataset, Sample, TaskKind, TaskSpec};
use bicl_core::losses::{Classification, Generative, TaskObjective};
use bicl_core::memory::MemoryPair;
use bicl_core::metrics::{self, AccuracyMatrix};
use bicl_core::models::{Mlp, SplitParams, Vae};
use bicl_core::rng::{SeedStreams, Stream, TrainRngs};

use crate::checkpoint::{Checkpoint, ModelSpec};
use crate::config::{ExperimentConfig, Method, ModelKind, TaskFamily};
use crate::data::Splits;
use crate::output::{sample_grid, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    /// Importance-sampled test log-likelihood in nats.
    TestLl,
}

/// Results of one (config, method, memory, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub dataset: String,
    pub memory: usize,
    pub seed: u64,
    pub config_hash: String,
    pub metric: MetricKind,
    /// Row `t` holds the metric on tasks `0..=t` after training task `t`.
    pub matrix: Vec<Vec<f64>>,
    /// Diagonal mean, last-row mean and their difference.
    pub la: f64,
    pub ra: f64,
    pub bti: f64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Equality on everything but timing.
    pub fn same_payload(&self, other: &RunRecord) -> bool {
        RunRecord { wall_clock_secs: 0.0, ..self.clone() } == RunRecord { wall_clock_secs: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// Final model; the last task's network for the independent baseline.
    pub checkpoint: Checkpoint,
    /// Prior-sample grids after each task, when requested for VAE runs.
    pub grids: Vec<(usize, GrayImage)>,
}

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub memory: usize,
    pub seed: u64,
}

impl Cell {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Cell { method: cfg.method, memory: cfg.memory_size, seed }
    }

    /// File stem for run artifacts.
    pub fn stem(&self, cfg: &ExperimentConfig) -> String {
        format!("{}_{}_m{}_s{}", self.method, cfg.dataset_label(), self.memory, self.seed)
    }
}

/// Train/validation/test samples of every task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Vec<Sample>>,
    pub val: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
}

impl TaskData {
    pub fn stream(&self, batch_size: usize) -> Result<ContinuumStream> {
        let tasks = (0..self.train.len())
            .map(|t| Continuum::new(t, self.train[t].clone(), self.val[t].clone(), batch_size))
            .collect::<bicl_core::Result<Vec<_>>>()?;
        Ok(ContinuumStream::new(tasks))
    }
}

/// Task transforms for a run; permutation task 0 is the identity.
pub fn task_kinds(cfg: &ExperimentConfig, seeds: &SeedStreams) -> Result<Vec<TaskKind>> {
    Ok(match cfg.task_family {
        TaskFamily::Rotation => bicl_core::continuum::rotation_angles(cfg.tasks)
            .into_iter()
            .map(|degrees| TaskKind::Rotation { degrees })
            .collect(),
        TaskFamily::Permutation => (0..cfg.tasks)
            .map(|t| TaskKind::Permutation { seed: if t == 0 { 0 } else { seeds.seed(Stream::Data, 10_000 + t as u32) | 1 } })
            .collect(),
        TaskFamily::Class => {
            if cfg.tasks > 10 {
                bail!("class tasks: {} requested, 10 classes available", cfg.tasks);
            }
            (0..cfg.tasks).map(|label| TaskKind::Class { label }).collect()
        }
    })
}

/// Draws every task's samples from the seed's data stream.
pub fn build_task_data(cfg: &ExperimentConfig, data: &Splits, seed: u64) -> Result<TaskData> {
    let seeds = SeedStreams::new(seed);
    let kinds = task_kinds(cfg, &seeds)?;
    let mut td = TaskData { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (t, &kind) in kinds.iter().enumerate() {
        let i = t as u32;
        let spec = TaskSpec { kind, samples_per_task: cfg.samples_per_task };
        let pool = build_task(&data.train, &spec, t, &mut seeds.indexed(Stream::Data, i))
            .with_context(|| format!("building training data for task {t}"))?;
        let (tr, va) = split_train_val(pool, cfg.split_ratio, &mut seeds.indexed(Stream::Data, 1000 + i))?;
        let test_spec = TaskSpec { kind, samples_per_task: cfg.test_samples };
        let test = build_task(&data.test, &test_spec, t, &mut seeds.indexed(Stream::Data, 2000 + i))
            .with_context(|| format!("building test data for task {t}"))?;
        if tr.is_empty() || test.is_empty() {
            bail!("task {t} has no training or no test samples");
        }
        td.train.push(tr);
        td.val.push(va);
        td.test.push(test);
    }
    Ok(td)
}

fn classes(d: &Dataset) -> usize {
    (0..d.len()).map(|i| d.label(i)).max().map_or(0, |m| m + 1)
}

fn mlp_sizes(cfg: &ExperimentConfig, input: usize, classes: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(&cfg.mlp_hidden);
    s.push(classes);
    s
}

fn summarize(matrix: &[Vec<f64>]) -> (f64, f64, f64) {
    let t = matrix.len();
    let la = (0..t).map(|i| matrix[i][i]).sum::<f64>() / t as f64;
    let ra = matrix[t - 1].iter().sum::<f64>() / t as f64;
    (la, ra, la - ra)
}

/// Runs one cell end to end.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Splits, cell: Cell) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.method = cell.method;
    cfg.memory_size = cell.memory;
    cfg.validate()?;
    let start = Instant::now();
    let td = build_task_data(&cfg, data, cell.seed)?;
    let seeds = SeedStreams::new(cell.seed);
    let mut rngs = TrainRngs::new(&seeds);
    let stream = td.stream(cfg.continuum_batch)?;
    let input = data.train.dim();
    let scheme = cfg.effective_scheme();
    let init_seed = |t: u32| seeds.seed(Stream::Init, t);
    let mut matrix: Vec<Vec<f64>> = Vec::new();
    let mut grids = Vec::new();

    let (metric, checkpoint) = match cfg.model {
        ModelKind::Mlp => {
            let sizes = mlp_sizes(&cfg, input, classes(&data.train));
            let model = Mlp::new(sizes.clone(), scheme)?;
            let ck = match cfg.method {
                Method::Independent => {
                    let models = baselines::independent_train(
                        stream,
                        |t| baselines::independent_classifier(&sizes, cfg.tasks, scheme, cfg.outer_loss, init_seed(t as u32)),
                        &cfg.baseline,
                        &mut rngs,
                        |t, ms: &[IndependentModel<Classification>]| {
                            let row = ms
                                .iter()
                                .enumerate()
                                .map(|(j, m)| metrics::accuracy(m.problem.model(), &m.params, &td.test[j]))
                                .collect::<bicl_core::Result<Vec<_>>>()?;
                            debug_assert_eq!(row.len(), t + 1);
                            matrix.push(row);
                            Ok(())
                        },
                    )?;
                    let last = models.into_iter().last().context("no tasks trained")?;
                    Checkpoint { model: ModelSpec::Mlp(last.problem.model().clone()), params: last.params }
                }
                method => {
                    let problem = Classification::new(model.clone(), cfg.outer_loss)?;
                    let mut params = model.init_params(init_seed(0));
                    let mut eval = |t: usize, p: &SplitParams| -> bicl_core::Result<()> {
                        matrix.push(metrics::evaluate_accuracy(&model, p, &td.test[..=t])?);
                        Ok(())
                    };
                    train_shared(&cfg, method, &problem, &mut params, stream, &mut rngs, &mut eval)?;
                    Checkpoint { model: ModelSpec::Mlp(model.clone()), params }
                }
            };
            (MetricKind::Accuracy, ck)
        }
        ModelKind::Vae => {
            let vae = Vae::new(input, cfg.vae_encoder_hidden.clone(), cfg.vae_latent, cfg.vae_decoder_hidden.clone(), scheme)?;
            let problem = Generative::new(vae.clone());
            let mut params = vae.init_params(init_seed(0));
            let s = cfg.test_ll_samples;
            let want_grids = cfg.sample_grids;
            let mut eval = |t: usize, p: &SplitParams| -> bicl_core::Result<()> {
                let row = (0..=t)
                    .map(|j| {
                        let mut r = seeds.indexed(Stream::Evaluation, (t * cfg.tasks + j) as u32);
                        metrics::mean_test_ll(&vae, p, &td.test[j], s, &mut r)
                    })
                    .collect::<bicl_core::Result<Vec<_>>>()?;
                matrix.push(row);
                if want_grids {
                    let mut r = seeds.indexed(Stream::Evaluation, 1_000_000 + t as u32);
                    let img = sample_grid(&vae, p, 8, 8, &mut r)
                        .map_err(|e| bicl_core::Error::InvalidArgument(e.to_string()))?;
                    grids.push((t, img));
                }
                Ok(())
            };
            train_shared(&cfg, cfg.method, &problem, &mut params, stream, &mut rngs, &mut eval)?;
            (MetricKind::TestLl, Checkpoint { model: ModelSpec::Vae(vae.clone()), params })
        }
    };

    let (la, ra, bti) = match metric {
        MetricKind::Accuracy => {
            let mut a = AccuracyMatrix::new(matrix.len());
            for (t, row) in matrix.iter().enumerate() {
                a.set_row(t, row)?;
            }
            (metrics::learning_accuracy(&a)?, metrics::retained_accuracy(&a)?, metrics::bti(&a)?)
        }
        MetricKind::TestLl => summarize(&matrix),
    };
    let record = RunRecord {
        method: cell.method,
        dataset: cfg.dataset_label(),
        memory: cell.memory,
        seed: cell.seed,
        config_hash: cfg.hash(),
        metric,
        matrix,
        la,
        ra,
        bti,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { record, checkpoint, grids })
}

/// Methods that train one shared parameter set.
fn train_shared<P: TaskObjective>(
    cfg: &ExperimentConfig,
    method: Method,
    problem: &P,
    params: &mut SplitParams,
    stream: ContinuumStream,
    rngs: &mut TrainRngs,
    eval: &mut impl FnMut(usize, &SplitParams) -> bicl_core::Result<()>,
) -> Result<()> {
    match method {
        Method::Bicl => {
            let mut memory = MemoryPair::with_budget(cfg.memory_size, cfg.memory_train_fraction)?;
            bicl_train(stream, problem, params, &mut memory, &cfg.bicl, rngs, eval)?;
        }
        Method::Online => baselines::online_train(stream, problem, params, &cfg.baseline, rngs, eval)?,
        Method::Ewc => {
            baselines::ewc_train(stream, problem, params, &cfg.ewc(), rngs, eval)?;
        }
        Method::Independent => bail!("the independent baseline trains one network per task"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two separable classes coded in the first pixels.
    pub(crate) fn toy_splits() -> Splits {
        let make = |n: usize, salt: usize| {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let y = (i + salt) % 2;
                let mut img = vec![0.0f32; 16];
                img[y] = 1.0;
                img[5 + (i % 7)] = 0.3;
                images.push(img);
                labels.push(y as u8);
            }
            Dataset::from_parts(4, 4, images, labels).unwrap()
        };
        Splits { train: make(400, 0), test: make(200, 1) }
    }

    fn toy_config(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method,
            tasks: 1,
            samples_per_task: 200,
            test_samples: 100,
            memory_size: 20,
            mlp_hidden: vec![8],
            ..Default::default()
        };
        cfg.baseline.lr = 0.2;
        cfg
    }

    #[test]
    fn single_trivial_task_online() {
        let cfg = toy_config(Method::Online);
        let out = run_experiment(&cfg, &toy_splits(), Cell::from_config(&cfg, 0)).unwrap();
        let r = &out.record;
        assert_eq!(r.matrix.len(), 1);
        assert_eq!(r.la, r.ra);
        assert_eq!(r.bti, 0.0);
        assert_eq!(r.matrix[0][0], 1.0);
    }

    #[test]
    fn repeated_runs_have_identical_payloads() {
        for method in [Method::Bicl, Method::Ewc, Method::Independent] {
            let mut cfg = toy_config(method);
            cfg.tasks = 2;
            cfg.task_family = TaskFamily::Permutation;
            let a = run_experiment(&cfg, &toy_splits(), Cell::from_config(&cfg, 4)).unwrap();
            let b = run_experiment(&cfg, &toy_splits(), Cell::from_config(&cfg, 4)).unwrap();
            assert!(a.record.same_payload(&b.record));
            assert_eq!(a.checkpoint, b.checkpoint);
            assert_eq!(a.record.matrix.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2]);
        }
    }

    #[test]
    fn task_data_depends_only_on_seed() {
        let cfg = ExperimentConfig { tasks: 3, samples_per_task: 50, test_samples: 20, ..toy_config(Method::Online) };
        let s = toy_splits();
        assert_eq!(build_task_data(&cfg, &s, 1).unwrap(), build_task_data(&cfg, &s, 1).unwrap());
        assert_ne!(build_task_data(&cfg, &s, 1).unwrap(), build_task_data(&cfg, &s, 2).unwrap());
        let td = build_task_data(&cfg, &s, 1).unwrap();
        assert_eq!((td.train[0].len(), td.val[0].len(), td.test[2].len()), (40, 10, 20));
    }

    #[test]
    fn permutation_tasks_start_with_identity() {
        let cfg = ExperimentConfig { task_family: TaskFamily::Permutation, tasks: 3, ..Default::default() };
        let kinds = task_kinds(&cfg, &SeedStreams::new(5)).unwrap();
        assert_eq!(kinds[0], TaskKind::Permutation { seed: 0 });
        assert!(kinds[1..].iter().all(|k| !matches!(k, TaskKind::Permutation { seed: 0 })));
    }

    #[test]
    fn vae_run_reports_test_ll() {
        let mut cfg = toy_config(Method::Online);
        cfg.model = ModelKind::Vae;
        cfg.task_family = TaskFamily::Class;
        cfg.tasks = 2;
        cfg.samples_per_task = 100;
        cfg.test_samples = 10;
        cfg.vae_encoder_hidden = vec![6];
        cfg.vae_decoder_hidden = vec![6];
        cfg.vae_latent = 2;
        cfg.test_ll_samples = 4;
        cfg.sample_grids = true;
        cfg.baseline.optimizer = bicl_core::baselines::Optimizer::Adam;
        cfg.baseline.lr = 0.01;
        let out = run_experiment(&cfg, &toy_splits(), Cell::from_config(&cfg, 0)).unwrap();
        assert_eq!(out.record.metric, MetricKind::TestLl);
        assert!(out.record.matrix.iter().flatten().all(|v| v.is_finite() && *v < 0.0));
        assert_eq!(out.grids.len(), 2);
        assert_eq!((out.grids[0].1.width, out.grids[0].1.height), (32, 32));
    }
}
