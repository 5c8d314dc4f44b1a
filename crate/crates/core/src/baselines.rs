//! Comparison methods: online SGD, independent per-task networks and EWC.
//!
//! The baselines optimize the full parameter set `θ = (λ, w)` with the inner
//! objective of a [`TaskObjective`], on the union of each train/validation
//! batch pair, exactly once per pair.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{self, ValueAndGrad};
use crate::bilevel::{AdamConfig, AdamState};
use crate::continuum::{Continuum, ContinuumStream, Sample};
use crate::error::check_finite;
use crate::losses::TaskObjective;
use crate::models::{SplitParams, SplitScheme};
use crate::rng::TrainRngs;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig { lr: 0.01, optimizer: Optimizer::Sgd, adam: AdamConfig::default() }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// How Fisher penalties from several tasks combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EwcMode {
    /// Running sum of Fishers anchored at the latest snapshot.
    #[default]
    Sum,
    /// One quadratic term per finished task.
    PerTask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwcConfig {
    pub online: OnlineConfig,
    pub lambda_ewc: f64,
    pub mode: EwcMode,
    /// Samples per task used to estimate the Fisher diagonal.
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig { online: OnlineConfig::default(), lambda_ewc: 10.0, mode: EwcMode::Sum, fisher_samples: 200 }
    }
}

/// Diagonal Fisher estimate together with the parameters it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub values: SplitParams,
    pub anchor: SplitParams,
}

impl FisherDiag {
    fn check(&self, params: &SplitParams) -> Result<()> {
        for (a, b) in [
            (&self.values.lambda, &params.lambda),
            (&self.values.w, &params.w),
            (&self.anchor.lambda, &params.lambda),
            (&self.anchor.w, &params.w),
        ] {
            a.check_layout(b, "fisher")?;
        }
        Ok(())
    }

    /// `½ Σ_i F_i (θ_i − θ*_i)²`, without the `λ_ewc` factor.
    pub fn penalty(&self, params: &SplitParams) -> Result<f64> {
        self.check(params)?;
        let mut s = 0.0;
        for (f, a, p) in self.blocks(params) {
            s += f.iter().zip(a).zip(p).map(|((f, a), p)| f * (p - a) * (p - a)).sum::<f64>();
        }
        Ok(0.5 * s)
    }

    /// Adds `scale · F ⊙ (θ − θ*)` to `(grad_lambda, grad_w)`.
    fn add_gradient(&self, params: &SplitParams, scale: f64, grad: &mut ValueAndGrad) -> Result<()> {
        self.check(params)?;
        for (g, (f, a, p)) in
            [grad.grad_lambda.as_mut_slice(), grad.grad_w.as_mut_slice()].into_iter().zip(self.blocks(params))
        {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += scale * f[i] * (p[i] - a[i]);
            }
        }
        Ok(())
    }

    fn blocks<'a>(&'a self, params: &'a SplitParams) -> [(&'a [f64], &'a [f64], &'a [f64]); 2] {
        [
            (self.values.lambda.as_slice(), self.anchor.lambda.as_slice(), params.lambda.as_slice()),
            (self.values.w.as_slice(), self.anchor.w.as_slice(), params.w.as_slice()),
        ]
    }
}

/// `(λ_ewc / 2) Σ_i F_i (θ_i − θ*_i)²` over every stored term.
pub fn ewc_penalty(terms: &[FisherDiag], params: &SplitParams, lambda_ewc: f64) -> Result<f64> {
    let mut s = 0.0;
    for t in terms {
        s += t.penalty(params)?;
    }
    Ok(lambda_ewc * s)
}

/// Mean squared gradient of the per-sample loss on the problem's Fisher
/// batches, over `n` samples drawn without replacement (all of them when
/// `n ≥ samples.len()`).
pub fn estimate_fisher<P: TaskObjective, R: Rng + ?Sized>(
    problem: &P,
    params: &SplitParams,
    samples: &[Sample],
    n: usize,
    rng: &mut R,
) -> Result<FisherDiag> {
    if n == 0 {
        return Err(Error::invalid("fisher estimate needs at least one sample"));
    }
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let picks: Vec<usize> = if n >= samples.len() {
        (0..samples.len()).collect()
    } else {
        rand::seq::index::sample(rng, samples.len(), n).into_vec()
    };
    let mut acc = SplitParams { lambda: params.lambda.zeros_like(), w: params.w.zeros_like() };
    for &i in &picks {
        let batch = problem.fisher_batch(params, &samples[i], rng)?;
        let g = autodiff::value_and_grad(problem.inner(), &params.w, &params.lambda, &batch)?;
        for (a, g) in [(&mut acc.lambda, &g.grad_lambda), (&mut acc.w, &g.grad_w)] {
            for (a, g) in a.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += g * g;
            }
        }
    }
    let inv = 1.0 / picks.len() as f64;
    acc.lambda.scale(inv);
    acc.w.scale(inv);
    Ok(FisherDiag { values: acc, anchor: params.clone() })
}

/// Gradient stepper over both parameter blocks.
#[derive(Debug, Clone)]
struct Stepper {
    cfg: OnlineConfig,
    adam: Option<(AdamState, AdamState)>,
}

impl Stepper {
    fn new(cfg: OnlineConfig, params: &SplitParams) -> Result<Self> {
        cfg.validate()?;
        let adam = match cfg.optimizer {
            Optimizer::Sgd => None,
            Optimizer::Adam => Some((AdamState::new(&params.lambda), AdamState::new(&params.w))),
        };
        Ok(Stepper { cfg, adam })
    }

    fn step(&mut self, params: &mut SplitParams, g: &ValueAndGrad) -> Result<()> {
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        match &mut self.adam {
            None => {
                params.lambda.axpy(-self.cfg.lr, &g.grad_lambda)?;
                params.w.axpy(-self.cfg.lr, &g.grad_w)?;
            }
            Some((al, aw)) => {
                al.step(&mut params.lambda, &g.grad_lambda, self.cfg.lr, &self.cfg.adam)?;
                aw.step(&mut params.w, &g.grad_w, self.cfg.lr, &self.cfg.adam)?;
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite { value: f64::NAN, context: "baseline parameters" });
        }
        Ok(())
    }
}

/// Minibatch training for `epochs` passes over `samples`, reshuffled each pass
/// with `rngs.sampling`. Returns the mean minibatch loss of every epoch.
pub fn train_epochs<P: TaskObjective>(
    problem: &P,
    params: &mut SplitParams,
    samples: &[Sample],
    epochs: usize,
    batch_size: usize,
    cfg: &OnlineConfig,
    rngs: &mut TrainRngs,
) -> Result<Vec<f64>> {
    if batch_size == 0 || samples.is_empty() {
        return Err(Error::invalid("train_epochs needs samples and a positive batch size"));
    }
    let mut stepper = Stepper::new(*cfg, params)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut means = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rngs.sampling);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch_size) {
            let picked: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let batch = problem.batch(&picked, &mut rngs.noise)?;
            let g = autodiff::value_and_grad(problem.inner(), &params.w, &params.lambda, &batch)?;
            check_finite(g.loss, "epoch loss")?;
            stepper.step(params, &g)?;
            sum += g.loss;
            count += 1;
        }
        means.push(sum / count as f64);
    }
    Ok(means)
}

fn union(b_tr: &[Sample], b_val: &[Sample]) -> Vec<Sample> {
    b_tr.iter().chain(b_val).cloned().collect()
}

/// One pass of plain gradient descent over `task`, one step per batch pair;
/// returns the samples consumed.
fn train_one_task<P: TaskObjective>(
    problem: &P,
    task: Continuum,
    params: &mut SplitParams,
    stepper: &mut Stepper,
    rngs: &mut TrainRngs,
    penalty: Option<(&[FisherDiag], f64)>,
) -> Result<Vec<Sample>> {
    let id = task.task();
    let mut seen = Vec::new();
    for (pair, (b_tr, b_val)) in task.enumerate() {
        let samples = union(&b_tr, &b_val);
        if samples.is_empty() {
            continue;
        }
        let run = |params: &mut SplitParams, stepper: &mut Stepper, rngs: &mut TrainRngs| -> Result<()> {
            let batch = problem.batch(&samples, &mut rngs.noise)?;
            let mut g = autodiff::value_and_grad(problem.inner(), &params.w, &params.lambda, &batch)?;
            check_finite(g.loss, "baseline loss")?;
            if let Some((terms, lambda_ewc)) = penalty {
                for t in terms {
                    t.add_gradient(params, lambda_ewc, &mut g)?;
                }
            }
            stepper.step(params, &g)
        };
        run(params, stepper, rngs).map_err(|e| e.at_batch(id, pair))?;
        seen.extend(samples);
    }
    Ok(seen)
}

/// Online SGD (or Adam) over the whole stream, no memory.
pub fn online_train<P: TaskObjective>(
    stream: ContinuumStream,
    problem: &P,
    params: &mut SplitParams,
    cfg: &OnlineConfig,
    rngs: &mut TrainRngs,
    mut on_task_end: impl FnMut(usize, &SplitParams) -> Result<()>,
) -> Result<()> {
    problem.layout().check(params)?;
    let mut stepper = Stepper::new(*cfg, params)?;
    for task in stream {
        let id = task.task();
        train_one_task(problem, task, params, &mut stepper, rngs, None)?;
        on_task_end(id, params)?;
    }
    Ok(())
}

/// Online training plus the EWC quadratic pull toward earlier tasks' solutions.
pub fn ewc_train<P: TaskObjective>(
    stream: ContinuumStream,
    problem: &P,
    params: &mut SplitParams,
    cfg: &EwcConfig,
    rngs: &mut TrainRngs,
    mut on_task_end: impl FnMut(usize, &SplitParams) -> Result<()>,
) -> Result<Vec<FisherDiag>> {
    if !(cfg.lambda_ewc.is_finite() && cfg.lambda_ewc >= 0.0) {
        return Err(Error::invalid("ewc strength must be finite and nonnegative"));
    }
    problem.layout().check(params)?;
    let mut stepper = Stepper::new(cfg.online, params)?;
    let mut terms: Vec<FisherDiag> = Vec::new();
    for task in stream {
        let id = task.task();
        let penalty = (cfg.lambda_ewc > 0.0 && !terms.is_empty()).then_some((terms.as_slice(), cfg.lambda_ewc));
        let seen = train_one_task(problem, task, params, &mut stepper, rngs, penalty)?;
        on_task_end(id, params)?;
        if cfg.lambda_ewc == 0.0 || seen.is_empty() {
            continue;
        }
        let fisher = estimate_fisher(problem, params, &seen, cfg.fisher_samples, &mut rngs.sampling)?;
        match (cfg.mode, terms.last_mut()) {
            (EwcMode::Sum, Some(total)) => {
                total.values.lambda.axpy(1.0, &fisher.values.lambda)?;
                total.values.w.axpy(1.0, &fisher.values.w)?;
                total.anchor = fisher.anchor;
            }
            _ => terms.push(fisher),
        }
    }
    Ok(terms)
}

/// Hidden widths `floor(h / tasks)`, at least one; input and output kept.
pub fn reduced_sizes(sizes: &[usize], tasks: usize) -> Result<Vec<usize>> {
    if tasks == 0 {
        return Err(Error::invalid("independent baseline needs at least one task"));
    }
    let last = sizes.len().saturating_sub(1);
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &h)| if i == 0 || i == last { h } else { (h / tasks).max(1) })
        .collect())
}

/// One freshly built model per task.
#[derive(Debug, Clone)]
pub struct IndependentModel<P> {
    pub problem: P,
    pub params: SplitParams,
}

/// Trains one separate model per task, each only on its own task.
/// `make(t)` builds task `t`'s problem and initial parameters;
/// `on_task_end(t, models)` sees every model built so far.
pub fn independent_train<P: TaskObjective>(
    stream: ContinuumStream,
    mut make: impl FnMut(usize) -> Result<IndependentModel<P>>,
    cfg: &OnlineConfig,
    rngs: &mut TrainRngs,
    mut on_task_end: impl FnMut(usize, &[IndependentModel<P>]) -> Result<()>,
) -> Result<Vec<IndependentModel<P>>> {
    let mut models: Vec<IndependentModel<P>> = Vec::new();
    for task in stream {
        let id = task.task();
        let mut m = make(id)?;
        m.problem.layout().check(&m.params)?;
        let mut stepper = Stepper::new(*cfg, &m.params)?;
        train_one_task(&m.problem, task, &mut m.params, &mut stepper, rngs, None)?;
        models.push(m);
        on_task_end(id, &models)?;
    }
    Ok(models)
}

/// Scheme-preserving convenience for classifiers.
pub fn independent_classifier(
    sizes: &[usize],
    tasks: usize,
    scheme: SplitScheme,
    outer: crate::losses::LossKind,
    seed: u64,
) -> Result<IndependentModel<crate::losses::Classification>> {
    let model = crate::models::Mlp::new(reduced_sizes(sizes, tasks)?, scheme)?;
    let params = model.init_params(seed);
    Ok(IndependentModel { problem: crate::losses::Classification::new(model, outer)?, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuum::split_train_val;
    use crate::losses::{Classification, LossKind};
    use crate::metrics::{accuracy, bti, learning_accuracy, retained_accuracy, AccuracyMatrix};
    use crate::models::Mlp;
    use crate::rng::SeedStreams;
    use crate::ParamVector;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classifier(sizes: Vec<usize>) -> (Mlp, Classification) {
        let m = Mlp::new(sizes, SplitScheme::HiddenAsHyper).unwrap();
        (m.clone(), Classification::new(m, LossKind::XentMax).unwrap())
    }

    /// Task `t`: class `t` iff `x_t` is high, else class 2; `x_t` keeps clear
    /// of the boundary.
    fn task_samples(t: usize, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut x: Vec<f32> = (0..4).map(|_| rng.random::<f32>()).collect();
                let high = rng.random::<bool>();
                x[t] = if high { 0.8 } else { 0.2 } + 0.2 * (x[t] - 0.5);
                let y = if high { t } else { 2 };
                Sample { x: x.into(), y, task: t }
            })
            .collect()
    }

    fn stream_of(tasks: &[Vec<Sample>], batch: usize) -> ContinuumStream {
        ContinuumStream::new(
            tasks
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    let (tr, va) = split_train_val(s.clone(), 0.8, &mut ChaCha8Rng::seed_from_u64(t as u64)).unwrap();
                    Continuum::new(t, tr, va, batch).unwrap()
                })
                .collect(),
        )
    }

    fn rngs(seed: u64) -> TrainRngs {
        TrainRngs::new(&SeedStreams::new(seed))
    }

    #[test]
    fn epoch_losses_fall_on_a_separable_task() {
        let (m, p) = classifier(vec![4, 8, 3]);
        let mut params = m.init_params(1);
        let cfg = OnlineConfig { lr: 0.3, ..OnlineConfig::default() };
        let data = task_samples(0, 200, 2);
        let losses = train_epochs(&p, &mut params, &data, 5, 20, &cfg, &mut rngs(3)).unwrap();
        assert_eq!(losses.len(), 5);
        assert!(losses[4] < losses[0]);
        assert!(train_epochs(&p, &mut params, &data, 0, 20, &cfg, &mut rngs(3)).unwrap().is_empty());
        assert!(train_epochs(&p, &mut params, &data, 1, 0, &cfg, &mut rngs(3)).is_err());
    }

    #[test]
    fn zero_rate_leaves_model() {
        let (m, p) = classifier(vec![4, 5, 3]);
        let init = m.init_params(0);
        let mut params = init.clone();
        let cfg = OnlineConfig { lr: 0.0, ..OnlineConfig::default() };
        online_train(stream_of(&[task_samples(0, 50, 0)], 10), &p, &mut params, &cfg, &mut rngs(0), |_, _| Ok(()))
            .unwrap();
        assert_eq!(params, init);
    }

    #[test]
    fn single_step_matches_hand_update() {
        let (m, p) = classifier(vec![4, 3]);
        let init = m.init_params(1);
        let mut params = init.clone();
        // 1 train + 1 val sample: one batch pair
        let s = task_samples(0, 2, 1);
        let stream = ContinuumStream::new(vec![Continuum::new(0, vec![s[0].clone()], vec![s[1].clone()], 1).unwrap()]);
        let cfg = OnlineConfig { lr: 0.1, ..OnlineConfig::default() };
        online_train(stream, &p, &mut params, &cfg, &mut rngs(0), |_, _| Ok(())).unwrap();

        // softmax regression by hand: ∇W = (softmax(Wx+b) − e_y) xᵀ averaged
        let w0 = init.w.by_name("layer0.weight").unwrap();
        let b0 = init.w.by_name("layer0.bias").unwrap();
        let mut gw = [0.0; 12];
        let mut gb = [0.0; 3];
        for smp in &s {
            let x: Vec<f64> = smp.x.iter().map(|v| *v as f64).collect();
            let z: Vec<f64> = (0..3).map(|k| b0[k] + (0..4).map(|j| w0[k * 4 + j] * x[j]).sum::<f64>()).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| libm::exp(v - mx)).collect();
            let tot: f64 = e.iter().sum();
            for k in 0..3 {
                let d = (e[k] / tot - if k == smp.y { 1.0 } else { 0.0 }) / 2.0;
                gb[k] += d;
                for j in 0..4 {
                    gw[k * 4 + j] += d * x[j];
                }
            }
        }
        let got_w = params.w.by_name("layer0.weight").unwrap();
        let got_b = params.w.by_name("layer0.bias").unwrap();
        for i in 0..12 {
            assert!((got_w[i] - (w0[i] - 0.1 * gw[i])).abs() < 1e-12);
        }
        for k in 0..3 {
            assert!((got_b[k] - (b0[k] - 0.1 * gb[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn online_is_deterministic() {
        let (m, p) = classifier(vec![4, 6, 3]);
        let run = |opt| {
            let mut params = m.init_params(3);
            let cfg = OnlineConfig { lr: 0.05, optimizer: opt, ..OnlineConfig::default() };
            let tasks = [task_samples(0, 60, 3), task_samples(1, 60, 4)];
            online_train(stream_of(&tasks, 10), &p, &mut params, &cfg, &mut rngs(3), |_, _| Ok(())).unwrap();
            params
        };
        assert_eq!(run(Optimizer::Sgd), run(Optimizer::Sgd));
        assert_eq!(run(Optimizer::Adam), run(Optimizer::Adam));
        assert_ne!(run(Optimizer::Sgd), run(Optimizer::Adam));
    }

    #[test]
    fn zero_strength_ewc_is_online() {
        let (m, p) = classifier(vec![4, 6, 3]);
        let tasks = [task_samples(0, 60, 5), task_samples(1, 60, 6)];
        let cfg = OnlineConfig { lr: 0.05, ..OnlineConfig::default() };
        let mut a = m.init_params(5);
        online_train(stream_of(&tasks, 10), &p, &mut a, &cfg, &mut rngs(5), |_, _| Ok(())).unwrap();
        let mut b = m.init_params(5);
        let ecfg = EwcConfig { online: cfg, lambda_ewc: 0.0, ..EwcConfig::default() };
        let terms = ewc_train(stream_of(&tasks, 10), &p, &mut b, &ecfg, &mut rngs(5), |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert!(terms.is_empty());
    }

    fn diag(f: Vec<f64>, anchor: Vec<f64>) -> FisherDiag {
        FisherDiag {
            values: SplitParams { lambda: ParamVector::from_vec("l", vec![]), w: ParamVector::from_vec("w", f) },
            anchor: SplitParams { lambda: ParamVector::from_vec("l", vec![]), w: ParamVector::from_vec("w", anchor) },
        }
    }

    #[test]
    fn penalty_arithmetic() {
        let d = diag(vec![1.0, 2.0], vec![0.0, 0.0]);
        let at = |v: Vec<f64>| SplitParams { lambda: ParamVector::from_vec("l", vec![]), w: ParamVector::from_vec("w", v) };
        assert_eq!(ewc_penalty(core::slice::from_ref(&d), &at(vec![1.0, 1.0]), 10.0).unwrap(), 15.0);
        assert_eq!(ewc_penalty(core::slice::from_ref(&d), &at(vec![0.0, 0.0]), 10.0).unwrap(), 0.0);
        assert!(ewc_penalty(&[d], &at(vec![1.0]), 10.0).is_err());
    }

    #[test]
    fn penalty_gradient_matches_differences() {
        let d = diag(vec![0.5, 3.0, 1.5], vec![0.2, -0.4, 1.0]);
        let theta = SplitParams { lambda: ParamVector::from_vec("l", vec![]), w: ParamVector::from_vec("w", vec![1.0, 0.3, -0.7]) };
        let mut g = ValueAndGrad { loss: 0.0, grad_w: theta.w.zeros_like(), grad_lambda: theta.lambda.zeros_like() };
        d.add_gradient(&theta, 7.0, &mut g).unwrap();
        for i in 0..3 {
            let mut up = theta.clone();
            up.w.as_mut_slice()[i] += 1e-6;
            let mut dn = theta.clone();
            dn.w.as_mut_slice()[i] -= 1e-6;
            let fd = (ewc_penalty(core::slice::from_ref(&d), &up, 7.0).unwrap()
                - ewc_penalty(core::slice::from_ref(&d), &dn, 7.0).unwrap())
                / 2e-6;
            assert!((fd - g.grad_w.as_slice()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn logistic_fisher_matches_closed_form() {
        // two-class softmax regression on one feature: the weight of class 0
        // has Fisher x² p₀(1 − p₀) under labels drawn from the model
        let (m, p) = classifier(vec![1, 2]);
        let mut params = m.layout().zeros();
        params.w.as_mut_slice().copy_from_slice(&[0.8, -0.4, 0.1, 0.3]);
        let xs = [0.5f32, -1.0, 1.5, 2.0];
        let samples: Vec<Sample> = xs.iter().map(|&x| Sample { x: vec![x].into(), y: 0, task: 0 }).collect();
        let w = params.w.by_name("layer0.weight").unwrap();
        let b = params.w.by_name("layer0.bias").unwrap();
        let expect: f64 = xs
            .iter()
            .map(|&x| {
                let x = x as f64;
                let p0 = 1.0 / (1.0 + libm::exp((w[1] * x + b[1]) - (w[0] * x + b[0])));
                x * x * p0 * (1.0 - p0)
            })
            .sum::<f64>()
            / xs.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reps = 4000;
        let mut got = 0.0;
        let mut sq = 0.0;
        for _ in 0..reps {
            let f = estimate_fisher(&p, &params, &samples, 10, &mut rng).unwrap();
            assert!(f.values.w.is_nonnegative() && f.values.lambda.is_nonnegative());
            let v = f.values.w.by_name("layer0.weight").unwrap()[0];
            got += v;
            sq += v * v;
        }
        got /= reps as f64;
        let se = libm::sqrt((sq / reps as f64 - got * got) / reps as f64);
        assert!((got - expect).abs() < 4.0 * se, "got {got} expect {expect} se {se}");
    }

    #[test]
    fn saturated_model_has_vanishing_fisher() {
        let (m, p) = classifier(vec![1, 2]);
        let mut params = m.layout().zeros();
        params.w.as_mut_slice().copy_from_slice(&[0.0, 0.0, 60.0, -60.0]);
        let samples = vec![Sample { x: vec![1.0].into(), y: 0, task: 0 }];
        let f = estimate_fisher(&p, &params, &samples, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(f.values.w.max_abs() < 1e-40);
        assert!(estimate_fisher(&p, &params, &samples, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn ewc_modes_store_terms() {
        let (m, p) = classifier(vec![4, 6, 3]);
        let tasks = [task_samples(0, 40, 7), task_samples(1, 40, 8), task_samples(0, 40, 9)];
        for (mode, n) in [(EwcMode::Sum, 1), (EwcMode::PerTask, 3)] {
            let mut params = m.init_params(7);
            let cfg = EwcConfig { lambda_ewc: 10.0, mode, fisher_samples: 20, ..EwcConfig::default() };
            let terms = ewc_train(stream_of(&tasks, 10), &p, &mut params, &cfg, &mut rngs(7), |_, _| Ok(())).unwrap();
            assert_eq!(terms.len(), n);
            assert_eq!(terms.last().unwrap().anchor, params);
        }
    }

    #[test]
    fn reduced_widths() {
        assert_eq!(reduced_sizes(&[784, 100, 100, 10], 20).unwrap(), vec![784, 5, 5, 10]);
        assert_eq!(reduced_sizes(&[784, 100, 10], 300).unwrap(), vec![784, 1, 10]);
        assert_eq!(reduced_sizes(&[784, 100, 10], 1).unwrap(), vec![784, 100, 10]);
        assert!(reduced_sizes(&[4, 3], 0).is_err());
    }

    #[test]
    fn single_task_independent_is_online() {
        let tasks = [task_samples(0, 60, 10)];
        let cfg = OnlineConfig { lr: 0.05, ..OnlineConfig::default() };
        let models = independent_train(
            stream_of(&tasks, 10),
            |_| independent_classifier(&[4, 6, 3], 1, SplitScheme::HiddenAsHyper, LossKind::XentMax, 11),
            &cfg,
            &mut rngs(10),
            |_, _| Ok(()),
        )
        .unwrap();
        let (m, p) = classifier(vec![4, 6, 3]);
        let mut params = m.init_params(11);
        online_train(stream_of(&tasks, 10), &p, &mut params, &cfg, &mut rngs(10), |_, _| Ok(())).unwrap();
        assert_eq!(models[0].params, params);
    }

    #[test]
    fn independent_models_do_not_forget() {
        let tasks = [task_samples(0, 400, 12), task_samples(1, 400, 13)];
        let tests = [task_samples(0, 300, 14), task_samples(1, 300, 15)];
        let cfg = OnlineConfig { lr: 0.05, optimizer: Optimizer::Adam, ..OnlineConfig::default() };
        let mut acc = AccuracyMatrix::new(2);
        let models = independent_train(
            stream_of(&tasks, 10),
            |t| independent_classifier(&[4, 32, 3], 2, SplitScheme::HiddenAsHyper, LossKind::XentMax, 20 + t as u64),
            &cfg,
            &mut rngs(12),
            |t, models| {
                for (j, m) in models.iter().enumerate() {
                    acc.set(t, j, accuracy(m.problem.model(), &m.params, &tests[j])?)?;
                }
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(models.len(), 2);
        assert!(!core::ptr::eq(&models[0].params, &models[1].params));
        assert_eq!(models[0].problem.model().sizes(), &[4, 16, 3]);
        assert!(acc.get(0, 0).unwrap() >= 0.95 && acc.get(1, 1).unwrap() >= 0.95, "{acc:?}");
        assert_eq!(learning_accuracy(&acc).unwrap(), retained_accuracy(&acc).unwrap());
        assert_eq!(bti(&acc).unwrap(), 0.0);
    }
}
