//! Scalar objectives and the objectives the trainers optimize.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{self, Graph, ScalarFn, Var};
use crate::continuum::Sample;
use crate::models::{GaussianLatent, Mlp, SplitLayout, SplitParams, Vae};
use crate::scalar::Scalar;
use crate::{Error, ParamVector, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    XentMean,
    XentMax,
    ElboNeg,
}

/// Inputs and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

fn stack(samples: &[Sample]) -> Result<Tensor> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        if s.x.len() != d {
            return Err(Error::shape(format!("sample widths {} and {d} in one batch", s.x.len())));
        }
        data.extend(s.x.iter().map(|&v| v as f64));
    }
    Tensor::matrix(samples.len(), d, data)
}

impl LabeledBatch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(LabeledBatch { x: stack(samples)?, labels: samples.iter().map(|s| s.y).collect() })
    }
}

/// Inputs with one reparameterization noise row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeBatch {
    pub x: Tensor,
    pub noise: Tensor,
}

impl VaeBatch {
    pub fn from_samples<R: Rng + ?Sized>(samples: &[Sample], latent: usize, rng: &mut R) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let x = stack(samples)?;
        let noise = Tensor::matrix(samples.len(), latent, standard_normal(samples.len() * latent, rng))?;
        Ok(VaeBatch { x, noise })
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Mean or max of per-row softmax cross-entropy inside a graph.
pub fn xent_graph<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    let rows = g.softmax_xent_rows(logits, labels)?;
    match kind {
        LossKind::XentMean => g.mean(rows),
        LossKind::XentMax => g.max(rows),
        LossKind::ElboNeg => Err(Error::invalid("ELBO loss requested for a classifier")),
    }
}

fn xent_value(logits: &Tensor, labels: &[usize], kind: LossKind) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let l = g.input(logits.rows(), logits.cols(), logits.data())?;
    let loss = xent_graph(&mut g, l, labels, kind)?;
    g.scalar(loss)
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn softmax_xent_mean(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    xent_value(logits, labels, LossKind::XentMean)
}

/// Largest per-row cross-entropy.
pub fn softmax_xent_max(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    xent_value(logits, labels, LossKind::XentMax)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` in closed form.
pub fn kl_diag_gaussian(lat: &GaussianLatent) -> f64 {
    0.5 * lat.mu.iter().zip(&lat.log_var).map(|(m, lv)| m * m + libm::exp(*lv) - 1.0 - lv).sum::<f64>()
}

/// Per-row ELBO `log p(x|z) − KL(q(z|x) ‖ p(z))` with one reparameterized `z` per row.
pub fn elbo_rows_graph<S: Scalar>(
    g: &mut Graph<S>,
    vae: &Vae,
    net: &[Var],
    x: &Tensor,
    noise: &Tensor,
) -> Result<Var> {
    if noise.rows() != x.rows() {
        return Err(Error::shape(format!("{} noise rows for {} inputs", noise.rows(), x.rows())));
    }
    let xv = g.input(x.rows(), x.cols(), x.data())?;
    let nv = g.input(noise.rows(), noise.cols(), noise.data())?;
    let (mu, lv) = vae.encode_graph(g, net, xv)?;
    let z = vae.reparameterize_graph(g, mu, lv, nv)?;
    let logits = vae.decode_logits_graph(g, net, z)?;
    let rec = g.bernoulli_ll_rows(logits, x.data())?;
    let kl = g.kl_rows(mu, lv)?;
    g.sub(rec, kl)
}

/// Single-sample ELBO of one input under `noise`.
pub fn elbo(vae: &Vae, params: &SplitParams, x: &[f64], noise: &[f64]) -> Result<f64> {
    let loss = VaeLoss { model: vae.clone() };
    let batch = VaeBatch { x: Tensor::matrix(1, x.len(), x.to_vec())?, noise: Tensor::matrix(1, noise.len(), noise.to_vec())? };
    Ok(-autodiff::value(&loss, &params.w, &params.lambda, &batch)?)
}

/// `∇_λ f(a) · ∇_λ f(b)`, positive for transfer and negative for interference.
pub fn grad_dot<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch_a: &F::Batch,
    batch_b: &F::Batch,
) -> Result<f64> {
    let ga = autodiff::grad_lambda(f, w, lambda, batch_a)?;
    let gb = autodiff::grad_lambda(f, w, lambda, batch_b)?;
    ga.dot(&gb)
}

/// `f(a) + f(b) − α ∇_λ f(a)·∇_λ f(b)`.
pub fn transfer_loss<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch_a: &F::Batch,
    batch_b: &F::Batch,
    alpha_transfer: f64,
) -> Result<f64> {
    if alpha_transfer < 0.0 || alpha_transfer.is_nan() {
        return Err(Error::invalid("transfer coefficient must be nonnegative"));
    }
    let fa = autodiff::value(f, w, lambda, batch_a)?;
    let fb = autodiff::value(f, w, lambda, batch_b)?;
    Ok(fa + fb - alpha_transfer * grad_dot(f, w, lambda, batch_a, batch_b)?)
}

/// Classifier cross-entropy as a function of `(w, λ)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierLoss {
    pub model: Mlp,
    pub kind: LossKind,
}

impl ScalarFn for ClassifierLoss {
    type Batch = LabeledBatch;

    fn build<S: Scalar>(&self, g: &mut Graph<S>, w: &[Var], lambda: &[Var], batch: &LabeledBatch) -> Result<Var> {
        let net = self.model.layout().resolve(w, lambda)?;
        let x = g.input(batch.x.rows(), batch.x.cols(), batch.x.data())?;
        let logits = self.model.forward(g, &net, x)?;
        xent_graph(g, logits, &batch.labels, self.kind)
    }
}

/// Batch-mean negative ELBO as a function of `(w, λ)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeLoss {
    pub model: Vae,
}

impl ScalarFn for VaeLoss {
    type Batch = VaeBatch;

    fn build<S: Scalar>(&self, g: &mut Graph<S>, w: &[Var], lambda: &[Var], batch: &VaeBatch) -> Result<Var> {
        let net = self.model.layout().resolve(w, lambda)?;
        let rows = elbo_rows_graph(g, &self.model, &net, &batch.x, &batch.noise)?;
        let mean = g.mean(rows)?;
        Ok(g.scale(mean, -1.0))
    }
}

/// Everything a trainer needs to know about a model family: the inner and
/// outer objectives and how to turn samples into batches.
pub trait TaskObjective {
    type Batch: Clone;
    type Loss: ScalarFn<Batch = Self::Batch>;

    fn layout(&self) -> &SplitLayout;

    /// Objective adapted by the inner loop and used by the baselines.
    fn inner(&self) -> &Self::Loss;

    /// Validation objective differentiated for the hypergradient.
    fn outer(&self) -> &Self::Loss;

    fn batch<R: Rng + ?Sized>(&self, samples: &[Sample], rng: &mut R) -> Result<Self::Batch>;

    /// A one-sample batch whose squared loss gradient estimates the Fisher
    /// diagonal: the model's own sampled label for classifiers, the negative
    /// ELBO for VAEs.
    fn fisher_batch<R: Rng + ?Sized>(&self, params: &SplitParams, sample: &Sample, rng: &mut R) -> Result<Self::Batch>;
}

/// Classification with mean cross-entropy inside and (by default) max outside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    inner: ClassifierLoss,
    outer: ClassifierLoss,
}

impl Classification {
    pub fn new(model: Mlp, outer: LossKind) -> Result<Self> {
        if outer == LossKind::ElboNeg {
            return Err(Error::invalid("classifier outer loss must be a cross-entropy"));
        }
        Ok(Classification {
            inner: ClassifierLoss { model: model.clone(), kind: LossKind::XentMean },
            outer: ClassifierLoss { model, kind: outer },
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.inner.model
    }
}

impl TaskObjective for Classification {
    type Batch = LabeledBatch;
    type Loss = ClassifierLoss;

    fn layout(&self) -> &SplitLayout {
        self.inner.model.layout()
    }

    fn inner(&self) -> &ClassifierLoss {
        &self.inner
    }

    fn outer(&self) -> &ClassifierLoss {
        &self.outer
    }

    fn batch<R: Rng + ?Sized>(&self, samples: &[Sample], _rng: &mut R) -> Result<LabeledBatch> {
        LabeledBatch::from_samples(samples)
    }

    fn fisher_batch<R: Rng + ?Sized>(&self, params: &SplitParams, sample: &Sample, rng: &mut R) -> Result<LabeledBatch> {
        let mut batch = LabeledBatch::from_samples(core::slice::from_ref(sample))?;
        let logits = self.model().logits(params, &batch.x)?;
        batch.labels[0] = sample_categorical(logits.row(0), rng);
        Ok(batch)
    }
}

/// Draws a class from `softmax(logits)`.
pub fn sample_categorical<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// VAE trained on the negative ELBO at both levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generative {
    loss: VaeLoss,
}

impl Generative {
    pub fn new(model: Vae) -> Self {
        Generative { loss: VaeLoss { model } }
    }

    pub fn model(&self) -> &Vae {
        &self.loss.model
    }
}

impl TaskObjective for Generative {
    type Batch = VaeBatch;
    type Loss = VaeLoss;

    fn layout(&self) -> &SplitLayout {
        self.loss.model.layout()
    }

    fn inner(&self) -> &VaeLoss {
        &self.loss
    }

    fn outer(&self) -> &VaeLoss {
        &self.loss
    }

    fn batch<R: Rng + ?Sized>(&self, samples: &[Sample], rng: &mut R) -> Result<VaeBatch> {
        VaeBatch::from_samples(samples, self.loss.model.latent_dim(), rng)
    }

    fn fisher_batch<R: Rng + ?Sized>(&self, _params: &SplitParams, sample: &Sample, rng: &mut R) -> Result<VaeBatch> {
        self.batch(core::slice::from_ref(sample), rng)
    }
}
