//! Accuracy matrices, LA/RA/BTI and importance-sampled VAE test log-likelihood.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::BERNOULLI_CLAMP;
use crate::continuum::Sample;
use crate::losses::{standard_normal, LabeledBatch};
use crate::models::{Mlp, SplitParams, Vae};
use crate::{Error, Result, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EVAL_CHUNK: usize = 500;

/// `a[j][i]`: accuracy on task `i` after training through task `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    tasks: usize,
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix { tasks, entries: vec![None; tasks * tasks] }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, trained: usize, eval: usize, accuracy: f64) -> Result<()> {
        if trained >= self.tasks || eval >= self.tasks {
            return Err(Error::invalid(format!("entry ({trained}, {eval}) outside a {0}x{0} matrix", self.tasks)));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::invalid(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.entries[trained * self.tasks + eval] = Some(accuracy);
        Ok(())
    }

    /// Sets `a[trained][0..row.len()]`.
    pub fn set_row(&mut self, trained: usize, row: &[f64]) -> Result<()> {
        row.iter().enumerate().try_for_each(|(i, &a)| self.set(trained, i, a))
    }

    pub fn get(&self, trained: usize, eval: usize) -> Option<f64> {
        if trained < self.tasks && eval < self.tasks {
            self.entries[trained * self.tasks + eval]
        } else {
            None
        }
    }

    fn need(&self, trained: usize, eval: usize) -> Result<f64> {
        self.get(trained, eval).ok_or(Error::IncompleteMatrix { row: trained, col: eval })
    }

    /// Defined entries in row-major order.
    pub fn defined(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().enumerate().filter_map(|(k, e)| e.map(|a| (k / self.tasks, k % self.tasks, a)))
    }
}

fn nonempty(a: &AccuracyMatrix) -> Result<()> {
    if a.tasks == 0 {
        Err(Error::invalid("accuracy matrix has no tasks"))
    } else {
        Ok(())
    }
}

/// Mean of the diagonal.
pub fn learning_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    nonempty(a)?;
    let mut sum = 0.0;
    for i in 0..a.tasks {
        sum += a.need(i, i)?;
    }
    Ok(sum / a.tasks as f64)
}

/// Mean of the last row.
pub fn retained_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    nonempty(a)?;
    let last = a.tasks - 1;
    let mut sum = 0.0;
    for i in 0..a.tasks {
        sum += a.need(last, i)?;
    }
    Ok(sum / a.tasks as f64)
}

/// `LA − RA`; positive values mean forgetting.
pub fn bti(a: &AccuracyMatrix) -> Result<f64> {
    Ok(learning_accuracy(a)? - retained_accuracy(a)?)
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(model: &Mlp, params: &SplitParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch = LabeledBatch::from_samples(chunk)?;
        let pred = model.predict(params, &batch.x)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// One accuracy per test set.
pub fn evaluate_accuracy(model: &Mlp, params: &SplitParams, test_sets: &[Vec<Sample>]) -> Result<Vec<f64>> {
    test_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            if set.is_empty() {
                Err(Error::EmptyTestSet(i))
            } else {
                accuracy(model, params, set)
            }
        })
        .collect()
}

/// `Σ x log m + (1 − x) log(1 − m)` with `m = sigmoid(logit)` clamped like the training loss.
pub fn bernoulli_log_likelihood(logits: &[f64], x: &[f64]) -> f64 {
    logits
        .iter()
        .zip(x)
        .map(|(&l, &xi)| {
            let m = if l >= 0.0 { 1.0 / (1.0 + libm::exp(-l)) } else { libm::exp(l) / (1.0 + libm::exp(l)) };
            let m = m.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
            let mut acc = 0.0;
            if xi != 0.0 {
                acc += xi * libm::log(m);
            }
            if xi != 1.0 {
                acc += (1.0 - xi) * libm::log(1.0 - m);
            }
            acc
        })
        .sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(v.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Log importance weights `log p(x|z_s) + log p(z_s) − log q(z_s|x)` for
/// `z_s = μ + σ ⊙ noise_s`.
pub fn log_importance_weights(vae: &Vae, params: &SplitParams, x: &[f64], noise: &Tensor) -> Result<Vec<f64>> {
    let d = vae.latent_dim();
    if noise.cols() != d {
        return Err(Error::shape(format!("noise width {} for latent dim {d}", noise.cols())));
    }
    let lat = crate::models::vae_encode(vae, params, x)?;
    let mut out = Vec::with_capacity(noise.rows());
    let mut start = 0;
    while start < noise.rows() {
        let n = EVAL_CHUNK.min(noise.rows() - start);
        let mut z = Vec::with_capacity(n * d);
        let mut prior_minus_q = Vec::with_capacity(n);
        for s in start..start + n {
            let eps = noise.row(s);
            let mut lp = 0.0;
            for ((&mu, &lv), &e) in lat.mu.iter().zip(&lat.log_var).zip(eps).take(d) {
                let zk = mu + libm::exp(0.5 * lv) * e;
                z.push(zk);
                // log N(z; 0, 1) − log N(z; μ, σ²); the 2π terms cancel
                lp += -0.5 * zk * zk + 0.5 * lv + 0.5 * e * e;
            }
            prior_minus_q.push(lp);
        }
        let logits = vae.decode_logits(params, &Tensor::matrix(n, d, z)?)?;
        for (r, lp) in prior_minus_q.into_iter().enumerate() {
            out.push(bernoulli_log_likelihood(logits.row(r), x) + lp);
        }
        start += n;
    }
    Ok(out)
}

/// Importance-sampled `log p(x)` from the given proposal noise rows.
pub fn test_ll_with_noise(vae: &Vae, params: &SplitParams, x: &[f64], noise: &Tensor) -> Result<f64> {
    if noise.rows() == 0 {
        return Err(Error::invalid("importance sampling needs at least one sample"));
    }
    let w = log_importance_weights(vae, params, x, noise)?;
    Ok(log_sum_exp(&w) - libm::log(w.len() as f64))
}

/// `log (1/S) Σ_s p(x|z_s) p(z_s) / q(z_s|x)` with `z_s ~ q(z|x)`.
pub fn test_ll_importance<R: Rng + ?Sized>(
    vae: &Vae,
    params: &SplitParams,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("importance sampling needs at least one sample"));
    }
    let d = vae.latent_dim();
    let noise = Tensor::matrix(samples, d, standard_normal(samples * d, rng))?;
    test_ll_with_noise(vae, params, x, &noise)
}

/// Mean test-LL over a sample set.
pub fn mean_test_ll<R: Rng + ?Sized>(
    vae: &Vae,
    params: &SplitParams,
    set: &[Sample],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = 0.0;
    for s in set {
        let x: Vec<f64> = s.x.iter().map(|&v| v as f64).collect();
        sum += test_ll_importance(vae, params, &x, samples, rng)?;
    }
    Ok(sum / set.len() as f64)
}

/// Single-sample Monte-Carlo ELBO `log p(x|z) + log p(z) − log q(z|x)`; the
/// KL term is estimated from the same `z` rather than in closed form.
pub fn elbo_single_sample(vae: &Vae, params: &SplitParams, x: &[f64], noise: &[f64]) -> Result<f64> {
    let t = Tensor::matrix(1, noise.len(), noise.to_vec())?;
    Ok(log_importance_weights(vae, params, x, &t)?[0])
}

/// `log N(x; μ, σ²)` summed over coordinates.
pub fn log_normal(x: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((x, m), lv)| -0.5 * (LN_2PI + lv + (x - m) * (x - m) / libm::exp(*lv)))
        .sum()
}
