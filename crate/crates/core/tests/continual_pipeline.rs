//! Task generation, continuum streaming, BiCL training with replay and evaluation, end to end.

use bicl_core::baselines::{online_train, OnlineConfig, Optimizer};
use bicl_core::bilevel::{bicl_train, BiclHyperparams};
use bicl_core::continuum::{build_task, split_train_val, Continuum, ContinuumStream, Dataset, Sample, TaskKind, TaskSpec};
use bicl_core::losses::{Classification, LossKind};
use bicl_core::memory::MemoryPair;
use bicl_core::metrics::{bti, evaluate_accuracy, learning_accuracy, retained_accuracy, AccuracyMatrix};
use bicl_core::models::{Mlp, SplitParams, SplitScheme};
use bicl_core::rng::{SeedStreams, Stream, TrainRngs};

const TASKS: usize = 3;

/// 3x3 images; the label's pixel is bright, the others are noise.
fn dataset(n: usize, seed: u64) -> Dataset {
    let streams = SeedStreams::new(seed);
    let mut rng = streams.rng(Stream::Data);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 3;
        let mut img: Vec<f32> = (0..9).map(|_| 0.3 * rand::Rng::random::<f32>(&mut rng)).collect();
        img[y] = 1.0;
        images.push(img);
        labels.push(y as u8);
    }
    Dataset::from_parts(3, 3, images, labels).unwrap()
}

struct Tasks {
    train: Vec<(Vec<Sample>, Vec<Sample>)>,
    test: Vec<Vec<Sample>>,
}

fn tasks() -> Tasks {
    let (train_pool, test_pool) = (dataset(600, 1), dataset(300, 2));
    let seeds = SeedStreams::new(9);
    let mut out = Tasks { train: Vec::new(), test: Vec::new() };
    for t in 0..TASKS {
        let kind = TaskKind::Permutation { seed: if t == 0 { 0 } else { 100 + t as u64 } };
        let i = t as u32;
        let pool = build_task(&train_pool, &TaskSpec { kind, samples_per_task: 300 }, t, &mut seeds.indexed(Stream::Data, i)).unwrap();
        out.train.push(split_train_val(pool, 0.5, &mut seeds.indexed(Stream::Data, 100 + i)).unwrap());
        out.test.push(build_task(&test_pool, &TaskSpec { kind, samples_per_task: 90 }, t, &mut seeds.indexed(Stream::Data, 200 + i)).unwrap());
    }
    out
}

fn stream(t: &Tasks) -> ContinuumStream {
    ContinuumStream::new(t.train.iter().enumerate().map(|(i, (tr, va))| Continuum::new(i, tr.clone(), va.clone(), 10).unwrap()).collect())
}

fn model() -> (Mlp, Classification) {
    let m = Mlp::new(vec![9, 16, 3], SplitScheme::HiddenAsHyper).unwrap();
    (m.clone(), Classification::new(m, LossKind::XentMean).unwrap())
}

fn hp() -> BiclHyperparams {
    BiclHyperparams {
        eta_inner: 0.2,
        eta_hyper: 0.2,
        beta_lambda: 1.0,
        beta_w: 1.0,
        beta_lambda_task: 1.0,
        beta_w_task: 1.0,
        inner_steps: 1,
        meta_batches: 4,
        ..BiclHyperparams::default()
    }
}

fn run_bicl(t: &Tasks, seed: u64) -> (AccuracyMatrix, SplitParams, MemoryPair) {
    let (m, problem) = model();
    let mut params = m.init_params(seed);
    let mut memory = MemoryPair::with_budget(40, 0.5).unwrap();
    let mut acc = AccuracyMatrix::new(TASKS);
    let mut calls = Vec::new();
    let stats = bicl_train(stream(t), &problem, &mut params, &mut memory, &hp(), &mut TrainRngs::new(&SeedStreams::new(seed)), |task, p| {
        calls.push(task);
        acc.set_row(task, &evaluate_accuracy(&m, p, &t.test[..=task])?)
    })
    .unwrap();
    assert_eq!(calls, vec![0, 1, 2]);
    assert_eq!(stats.len(), TASKS);
    assert!(stats.iter().all(|s| s.pairs == 15 && s.meta_steps == 15 * 4));
    (acc, params, memory)
}

#[test]
fn bicl_learns_each_task_and_fills_memory_uniformly() {
    let t = tasks();
    let (acc, params, memory) = run_bicl(&t, 0);
    assert!(params.all_finite());
    assert_eq!((memory.train.len(), memory.val.len()), (20, 20));
    assert_eq!((memory.train.seen(), memory.val.seen()), (450, 450));
    for task in 0..TASKS {
        assert!(memory.train.items().iter().any(|s| s.task == task), "task {task} missing from memory");
    }
    let la = learning_accuracy(&acc).unwrap();
    assert!(la > 0.8, "LA {la}");
    assert_eq!(bti(&acc).unwrap(), la - retained_accuracy(&acc).unwrap());
}

#[test]
fn training_is_reproducible_per_seed() {
    let t = tasks();
    let (a, pa, ma) = run_bicl(&t, 5);
    let (b, pb, mb) = run_bicl(&t, 5);
    assert_eq!(pa, pb);
    assert_eq!(ma, mb);
    assert_eq!(learning_accuracy(&a).unwrap(), learning_accuracy(&b).unwrap());
    let (_, pc, _) = run_bicl(&t, 6);
    assert_ne!(pa, pc);
}

#[test]
fn replay_retains_more_than_online_on_conflicting_tasks() {
    let t = tasks();
    let (acc, _, _) = run_bicl(&t, 1);
    let (m, problem) = model();
    let mut params = m.init_params(1);
    let mut online = AccuracyMatrix::new(TASKS);
    let cfg = OnlineConfig { lr: 0.01, optimizer: Optimizer::Adam, ..OnlineConfig::default() };
    online_train(stream(&t), &problem, &mut params, &cfg, &mut TrainRngs::new(&SeedStreams::new(1)), |task, p| {
        online.set_row(task, &evaluate_accuracy(&m, p, &t.test[..=task])?)
    })
    .unwrap();
    let (rb, ro) = (retained_accuracy(&acc).unwrap(), retained_accuracy(&online).unwrap());
    assert!(rb > ro, "BiCL RA {rb} vs online RA {ro}");
}
