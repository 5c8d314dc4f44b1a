//! Bilevel optimizer: recorded inner adaptation, reverse-mode hypergradient,
//! hyper-update, Reptile meta-steps and the full continual training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{self, ScalarFn, SecondOrderMethod};
use crate::continuum::{Continuum, ContinuumStream};
use crate::losses::TaskObjective;
use crate::memory::{MemoryPair, Replay};
use crate::models::SplitParams;
use crate::rng::TrainRngs;
use crate::{Error, ParamVector, Result};

/// Forward dynamics of the inner problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerOptimizer {
    /// Plain gradient steps; the reverse pass is exact.
    #[default]
    Sgd,
    /// Adam steps forward with the SGD-form reverse recursion, an approximation.
    AdamApprox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        AdamState { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    /// Applies one Adam step to `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64, cfg: &AdamConfig) -> Result<()> {
        params.check_layout(grad, "adam gradient")?;
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        let (m, v) = (self.m.as_mut_slice(), self.v.as_mut_slice());
        for (i, (p, g)) in params.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + cfg.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiclHyperparams {
    /// Inner step size `η`.
    pub eta_inner: f64,
    /// Hyper-update step size; equal to `eta_inner` by default.
    pub eta_hyper: f64,
    pub beta_lambda: f64,
    pub beta_w: f64,
    pub beta_lambda_task: f64,
    pub beta_w_task: f64,
    /// Inner steps `K`.
    pub inner_steps: usize,
    /// Meta-batches `b` per continuum pair.
    pub meta_batches: usize,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub optimizer: InnerOptimizer,
    pub adam: AdamConfig,
    pub second_order: SecondOrderMethod,
}

impl Default for BiclHyperparams {
    fn default() -> Self {
        BiclHyperparams {
            eta_inner: 0.01,
            eta_hyper: 0.01,
            beta_lambda: 0.3,
            beta_w: 0.3,
            beta_lambda_task: 0.3,
            beta_w_task: 0.3,
            inner_steps: 5,
            meta_batches: 2,
            batch_size: 10,
            val_batch_size: 10,
            optimizer: InnerOptimizer::Sgd,
            adam: AdamConfig::default(),
            second_order: SecondOrderMethod::Exact,
        }
    }
}

impl BiclHyperparams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("beta_lambda", self.beta_lambda),
            ("beta_w", self.beta_w),
            ("beta_lambda_task", self.beta_lambda_task),
            ("beta_w_task", self.beta_w_task),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("{name} = {r} outside (0, 1]")));
            }
        }
        for (name, e) in [("eta_inner", self.eta_inner), ("eta_hyper", self.eta_hyper)] {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::invalid(format!("{name} = {e} must be positive")));
            }
        }
        if self.meta_batches == 0 || self.batch_size == 0 || self.val_batch_size == 0 {
            return Err(Error::invalid("meta_batches and batch sizes must be at least 1"));
        }
        Ok(())
    }
}

/// Recorded inner trajectory `w_0 … w_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTape<B> {
    pub w_trajectory: Vec<ParamVector>,
    /// Batch used by step `k` (producing `w_{k+1}`).
    pub batches: Vec<B>,
    pub lambda: ParamVector,
    pub eta: f64,
    pub optimizer: InnerOptimizer,
    /// Adam moments after each step, when Adam drives the forward pass.
    pub adam_states: Vec<AdamState>,
}

impl<B> InnerTape<B> {
    pub fn steps(&self) -> usize {
        self.w_trajectory.len() - 1
    }

    pub fn final_w(&self) -> &ParamVector {
        self.w_trajectory.last().expect("trajectory holds w_0")
    }
}

/// `K` recorded steps on `batch`.
pub fn inner_adapt<F>(
    f: &F,
    lambda: &ParamVector,
    w0: &ParamVector,
    batch: &F::Batch,
    hp: &BiclHyperparams,
) -> Result<(ParamVector, InnerTape<F::Batch>)>
where
    F: ScalarFn,
    F::Batch: Clone,
{
    inner_adapt_batches(f, lambda, w0, vec![batch.clone(); hp.inner_steps], hp)
}

/// One recorded step per batch in `batches`.
pub fn inner_adapt_batches<F>(
    f: &F,
    lambda: &ParamVector,
    w0: &ParamVector,
    batches: Vec<F::Batch>,
    hp: &BiclHyperparams,
) -> Result<(ParamVector, InnerTape<F::Batch>)>
where
    F: ScalarFn,
{
    let mut traj = Vec::with_capacity(batches.len() + 1);
    traj.push(w0.clone());
    let mut adam = AdamState::new(w0);
    let mut adam_states = Vec::new();
    let mut w = w0.clone();
    for (k, batch) in batches.iter().enumerate() {
        let (_, g) = autodiff::value_and_grad_w(f, &w, lambda, batch).map_err(|e| e.at_step(k + 1))?;
        match hp.optimizer {
            InnerOptimizer::Sgd => w.axpy(-hp.eta_inner, &g)?,
            InnerOptimizer::AdamApprox => {
                adam.step(&mut w, &g, hp.eta_inner, &hp.adam)?;
                adam_states.push(adam.clone());
            }
        }
        if !w.all_finite() {
            return Err(Error::NonFinite { value: f64::NAN, context: "inner parameters" }.at_step(k + 1));
        }
        traj.push(w.clone());
    }
    let tape = InnerTape {
        w_trajectory: traj,
        batches,
        lambda: lambda.clone(),
        eta: hp.eta_inner,
        optimizer: hp.optimizer,
        adam_states,
    };
    Ok((w, tape))
}

/// Total derivative `dL_val/dλ` through the unrolled inner dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradient {
    pub p: ParamVector,
    /// Validation loss at `w_K`.
    pub val_loss: f64,
}

/// Reverse pass: starting from `α = ∇_w L_val(w_K)`, `p = ∇_λ L_val(w_K)`, for
/// `k = K … 1` apply `p ← p − η ∇_λ∇_w L(w_{k−1}) α` and `α ← α − η ∇_w∇_w L(w_{k−1}) α`.
pub fn reverse_hypergrad<Fi, Fo>(
    tape: &InnerTape<Fi::Batch>,
    inner: &Fi,
    lambda: &ParamVector,
    val_batch: &Fo::Batch,
    outer: &Fo,
    method: SecondOrderMethod,
) -> Result<HyperGradient>
where
    Fi: ScalarFn,
    Fo: ScalarFn,
{
    if tape.lambda != *lambda {
        return Err(Error::invalid("tape was recorded at a different λ"));
    }
    if tape.batches.len() != tape.steps() {
        return Err(Error::invalid("tape holds a batch count different from its step count"));
    }
    let top = autodiff::value_and_grad(outer, tape.final_w(), lambda, val_batch)?;
    let mut adjoint = top.grad_w;
    let mut p = top.grad_lambda;
    for k in (1..=tape.steps()).rev() {
        let so = method.apply(inner, &tape.w_trajectory[k - 1], lambda, &tape.batches[k - 1], &adjoint)?;
        p.axpy(-tape.eta, &so.hvp_lw)?;
        adjoint.axpy(-tape.eta, &so.hvp_ww)?;
    }
    if !p.all_finite() {
        return Err(Error::NonFinite { value: f64::NAN, context: "hypergradient" });
    }
    Ok(HyperGradient { p, val_loss: top.loss })
}

/// `λ' = λ + η p`. Callers pass the negated hypergradient to descend.
pub fn hyper_update(lambda: &ParamVector, p: &ParamVector, eta: f64) -> Result<ParamVector> {
    let mut out = lambda.clone();
    out.axpy(eta, p)?;
    Ok(out)
}

/// `anchor + β (current − anchor)`.
pub fn reptile_step(current: &ParamVector, anchor: &ParamVector, beta: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("reptile rate {beta} outside [0, 1]")));
    }
    let mut out = anchor.clone();
    out.axpy(beta, &current.sub(anchor)?)?;
    Ok(out)
}

/// Summary of one task's training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskStats {
    pub pairs: usize,
    pub meta_steps: usize,
    pub mean_val_loss: f64,
}

/// The continual training loop over a [`TaskObjective`].
#[derive(Debug, Clone)]
pub struct BiclTrainer<'a, P> {
    problem: &'a P,
    hp: BiclHyperparams,
}

impl<'a, P> BiclTrainer<'a, P>
where
    P: TaskObjective,
{
    pub fn new(problem: &'a P, hp: BiclHyperparams) -> Result<Self> {
        hp.validate()?;
        Ok(BiclTrainer { problem, hp })
    }

    pub fn hyperparams(&self) -> &BiclHyperparams {
        &self.hp
    }

    /// Inner adaptation, hypergradient and hyper-update on one meta-batch;
    /// `w` is left at the adapted `w_K`.
    pub fn meta_step(&self, params: &mut SplitParams, train: P::Batch, val: &P::Batch) -> Result<f64> {
        let batches: Vec<P::Batch> = if self.hp.inner_steps == 0 {
            Vec::new()
        } else {
            let mut v = Vec::with_capacity(self.hp.inner_steps);
            v.push(train);
            while v.len() < self.hp.inner_steps {
                v.push(v[0].clone());
            }
            v
        };
        self.meta_step_batches(params, batches, val)
    }

    fn meta_step_batches(&self, params: &mut SplitParams, batches: Vec<P::Batch>, val: &P::Batch) -> Result<f64> {
        let inner = self.problem.inner();
        let (w_k, tape) = inner_adapt_batches(inner, &params.lambda, &params.w, batches, &self.hp)?;
        let hg = reverse_hypergrad(&tape, inner, &params.lambda, val, self.problem.outer(), self.hp.second_order)?;
        params.lambda = hyper_update(&params.lambda, &hg.p, -self.hp.eta_hyper)?;
        params.w = w_k;
        Ok(hg.val_loss)
    }

    /// Trains on one task's continuum, then applies the task-level Reptile step.
    pub fn train_task<M: Replay>(
        &self,
        task: Continuum,
        params: &mut SplitParams,
        memory: &mut MemoryPair<M>,
        rngs: &mut TrainRngs,
    ) -> Result<TaskStats> {
        let id = task.task();
        let task_anchor = params.clone();
        let mut stats = TaskStats::default();
        let mut loss_sum = 0.0;
        for (pair, (b_tr, b_val)) in task.enumerate() {
            self.train_pair(params, memory, rngs, &b_tr, &b_val, &mut stats, &mut loss_sum)
                .map_err(|e| e.at_batch(id, pair))?;
            stats.pairs += 1;
        }
        params.lambda = reptile_step(&params.lambda, &task_anchor.lambda, self.hp.beta_lambda_task)?;
        params.w = reptile_step(&params.w, &task_anchor.w, self.hp.beta_w_task)?;
        stats.mean_val_loss = if stats.meta_steps > 0 { loss_sum / stats.meta_steps as f64 } else { 0.0 };
        Ok(stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_pair<M: Replay>(
        &self,
        params: &mut SplitParams,
        memory: &mut MemoryPair<M>,
        rngs: &mut TrainRngs,
        b_tr: &[crate::continuum::Sample],
        b_val: &[crate::continuum::Sample],
        stats: &mut TaskStats,
        loss_sum: &mut f64,
    ) -> Result<()> {
        let anchor = params.clone();
        let b = self.hp.meta_batches;
        let tr = memory.train.batch_sample(b_tr, b, self.hp.batch_size, &mut rngs.sampling);
        let va = memory.val.batch_sample(b_val, b, self.hp.val_batch_size, &mut rngs.sampling);
        for (t, v) in tr.iter().zip(&va) {
            if t.is_empty() || v.is_empty() {
                continue;
            }
            let train = self.problem.batch(t, &mut rngs.noise)?;
            let val = self.problem.batch(v, &mut rngs.noise)?;
            *loss_sum += self.meta_step(params, train, &val)?;
            stats.meta_steps += 1;
        }
        memory.train.reservoir_update(b_tr, &mut rngs.reservoir);
        memory.val.reservoir_update(b_val, &mut rngs.reservoir);
        params.lambda = reptile_step(&params.lambda, &anchor.lambda, self.hp.beta_lambda)?;
        params.w = reptile_step(&params.w, &anchor.w, self.hp.beta_w)?;
        Ok(())
    }
}

/// Continual training over every task of `stream`, calling
/// `on_task_end(task, params)` after each task (for evaluation).
pub fn bicl_train<P, M>(
    stream: ContinuumStream,
    problem: &P,
    params: &mut SplitParams,
    memory: &mut MemoryPair<M>,
    hp: &BiclHyperparams,
    rngs: &mut TrainRngs,
    mut on_task_end: impl FnMut(usize, &SplitParams) -> Result<()>,
) -> Result<Vec<TaskStats>>
where
    P: TaskObjective,
    M: Replay,
{
    let trainer = BiclTrainer::new(problem, *hp)?;
    let mut out = Vec::new();
    for task in stream {
        let id = task.task();
        out.push(trainer.train_task(task, params, memory, rngs)?);
        on_task_end(id, params)?;
    }
    Ok(out)
}

/// Two-batch outer objectives `g_0`, `g_1` of `λ` with closed-form
/// gradients and Hessians, for checking what Reptile optimizes.
pub trait TwoBatchProblem {
    fn dim(&self) -> usize;
    fn lambda0(&self) -> Vec<f64>;
    /// `∇g_s(λ)`.
    fn grad(&self, s: usize, lambda: &[f64]) -> Vec<f64>;
    /// `∇²g_s(λ)`, row-major.
    fn hessian(&self, s: usize, lambda: &[f64]) -> Vec<f64>;
}

/// Bilevel toy with inner solution `w_j(λ) = c_j e^{−λ_j}` (the minimizer of
/// `Σ_j ½ e^{λ_j} w_j² − c_j w_j`) and outer batch losses
/// `g_s(λ) = ½‖B w(λ) − y_s‖² + ½ρ‖λ‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpToy {
    /// `m × n`, row-major.
    pub b: Vec<f64>,
    pub m: usize,
    pub c: Vec<f64>,
    pub y: [Vec<f64>; 2],
    pub rho: f64,
    pub lambda0: Vec<f64>,
}

impl ExpToy {
    pub fn standard() -> Self {
        ExpToy {
            b: vec![0.30, -0.20, 0.10, 0.05, 0.25, -0.15, -0.10, 0.20, 0.30, 0.15, 0.05, -0.25],
            m: 4,
            c: vec![0.40, -0.30, 0.25],
            y: [vec![0.10, -0.05, 0.08, 0.02], vec![-0.06, 0.09, -0.04, 0.07]],
            rho: 0.05,
            lambda0: vec![0.20, -0.10, 0.30],
        }
    }

    fn w(&self, lambda: &[f64]) -> Vec<f64> {
        self.c.iter().zip(lambda).map(|(c, l)| c * libm::exp(-l)).collect()
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    // (w, Bᵀ r)
    fn parts(&self, s: usize, lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n());
        let w = self.w(lambda);
        let r: Vec<f64> =
            (0..m).map(|i| (0..n).map(|j| self.b[i * n + j] * w[j]).sum::<f64>() - self.y[s][i]).collect();
        let btr = (0..n).map(|j| (0..m).map(|i| self.b[i * n + j] * r[i]).sum()).collect();
        (w, btr)
    }
}

impl TwoBatchProblem for ExpToy {
    fn dim(&self) -> usize {
        self.n()
    }

    fn lambda0(&self) -> Vec<f64> {
        self.lambda0.clone()
    }

    fn grad(&self, s: usize, lambda: &[f64]) -> Vec<f64> {
        let (w, btr) = self.parts(s, lambda);
        (0..self.n()).map(|j| -w[j] * btr[j] + self.rho * lambda[j]).collect()
    }

    fn hessian(&self, s: usize, lambda: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m, self.n());
        let (w, btr) = self.parts(s, lambda);
        let mut h = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                let btb: f64 = (0..m).map(|i| self.b[i * n + j] * self.b[i * n + k]).sum();
                h[j * n + k] = w[j] * btb * w[k];
            }
            h[j * n + j] += w[j] * btr[j] + self.rho;
        }
        h
    }
}

/// `g_s(λ) = a_sᵀλ`: zero curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearToy {
    pub a: [Vec<f64>; 2],
    pub lambda0: Vec<f64>,
}

impl TwoBatchProblem for LinearToy {
    fn dim(&self) -> usize {
        self.lambda0.len()
    }

    fn lambda0(&self) -> Vec<f64> {
        self.lambda0.clone()
    }

    fn grad(&self, s: usize, _lambda: &[f64]) -> Vec<f64> {
        self.a[s].clone()
    }

    fn hessian(&self, _s: usize, _lambda: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim() * self.dim()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Row {
    pub alpha: f64,
    /// `‖E[p_reptile] − (∇g_0 + ∇g_1 − (α/2)∇(∇g_0ᵀ∇g_1))‖`.
    pub residual: f64,
    /// `‖E[p_reptile] − (∇g_0 + ∇g_1)‖`.
    pub limit_gap: f64,
}

fn matvec(h: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| h[i * n + j] * v[j]).sum()).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Reptile direction of two SGD steps in the order `first`, `second`:
/// `(λ_0 − λ_2)/α = ∇g_first(λ_0) + ∇g_second(λ_1)`.
pub fn reptile_direction<P: TwoBatchProblem>(problem: &P, lambda0: &[f64], alpha: f64, first: usize) -> Vec<f64> {
    let second = 1 - first;
    let g0 = problem.grad(first, lambda0);
    let l1: Vec<f64> = lambda0.iter().zip(&g0).map(|(l, g)| l - alpha * g).collect();
    let g1 = problem.grad(second, &l1);
    g0.iter().zip(&g1).map(|(a, b)| a + b).collect()
}

/// Residual of the expected Reptile direction (both batch orders averaged)
/// against the gradient of the transfer objective, per step size.
pub fn theorem1_check<P: TwoBatchProblem>(problem: &P, step_sizes: &[f64]) -> Vec<Theorem1Row> {
    let l0 = problem.lambda0();
    let (g0, g1) = (problem.grad(0, &l0), problem.grad(1, &l0));
    let (h0, h1) = (problem.hessian(0, &l0), problem.hessian(1, &l0));
    let (h0g1, h1g0) = (matvec(&h0, &g1), matvec(&h1, &g0));
    let sum: Vec<f64> = g0.iter().zip(&g1).map(|(a, b)| a + b).collect();
    step_sizes
        .iter()
        .map(|&alpha| {
            let (p01, p10) = (reptile_direction(problem, &l0, alpha, 0), reptile_direction(problem, &l0, alpha, 1));
            let expected: Vec<f64> = p01.iter().zip(&p10).map(|(a, b)| 0.5 * (a + b)).collect();
            let target: Vec<f64> =
                (0..sum.len()).map(|i| sum[i] - 0.5 * alpha * (h0g1[i] + h1g0[i])).collect();
            Theorem1Row { alpha, residual: dist(&expected, &target), limit_gap: dist(&expected, &sum) }
        })
        .collect()
}

/// `log(r_i / r_{i+1}) / log(α_i / α_{i+1})` for consecutive rows.
pub fn observed_orders(rows: &[Theorem1Row]) -> Vec<f64> {
    rows.windows(2)
        .map(|w| libm::log(w[0].residual / w[1].residual) / libm::log(w[0].alpha / w[1].alpha))
        .collect()
}
