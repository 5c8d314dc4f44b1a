//! Oracle suites: hypergradient exactness, Reptile order, reservoir
//! uniformity and the summary-metric identities.

use std::fmt;

use bicl_core::autodiff::{self, finite_diff_grad, max_relative_error, SecondOrderMethod};
use bicl_core::bilevel::{inner_adapt, observed_orders, reverse_hypergrad, theorem1_check, BiclHyperparams, ExpToy, LinearToy};
use bicl_core::continuum::Sample;
use bicl_core::losses::{ClassifierLoss, LabeledBatch, LossKind};
use bicl_core::memory::{reservoir_update, EpisodicMemory};
use bicl_core::metrics::{bti, learning_accuracy, retained_accuracy, AccuracyMatrix};
use bicl_core::models::{Mlp, SplitScheme};
use bicl_core::rng::Rng;
use bicl_core::Tensor;
use rand::{Rng as _, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Hypergrad,
    Theorem1,
    Reservoir,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Hypergrad, Suite::Theorem1, Suite::Reservoir, Suite::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Hypergrad => "hypergrad",
            Suite::Theorem1 => "theorem1",
            Suite::Reservoir => "reservoir",
            Suite::Metrics => "metrics",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn run(self) -> Vec<Check> {
        match self {
            Suite::Hypergrad => hypergrad_checks(),
            Suite::Theorem1 => theorem1_checks(),
            Suite::Reservoir => reservoir_checks(),
            Suite::Metrics => metrics_checks(),
        }
    }
}

/// One verified quantity against its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Check {
        Check { name: name.into(), value, bound: format!("<= {bound:e}"), pass: value <= bound }
    }

    fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Check {
        Check { name: name.into(), value, bound: format!(">= {bound}"), pass: value >= bound }
    }

    fn failed(name: impl Into<String>, why: impl fmt::Display) -> Check {
        Check { name: name.into(), value: f64::NAN, bound: format!("error: {why}"), pass: false }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {:.6e} ({})", self.name, self.value, self.bound)
    }
}

/// Relative error of the reverse hypergradient of a random `2-8-3` MLP
/// against central differences rerunning the full `K`-step unroll.
pub fn hypergrad_relative_error(seed: u64, steps: usize) -> bicl_core::Result<f64> {
    let model = Mlp::new(vec![2, 8, 3], SplitScheme::HiddenAsHyper)?;
    let params = model.init_params(seed);
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    let mut batch = |n: usize| -> bicl_core::Result<LabeledBatch> {
        Ok(LabeledBatch {
            x: Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect())?,
            labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
        })
    };
    let (train, val) = (batch(10)?, batch(10)?);
    let inner = ClassifierLoss { model: model.clone(), kind: LossKind::XentMean };
    let outer = ClassifierLoss { model, kind: LossKind::XentMax };
    let hp = BiclHyperparams { eta_inner: 0.1, inner_steps: steps, ..BiclHyperparams::default() };
    let (_, tape) = inner_adapt(&inner, &params.lambda, &params.w, &train, &hp)?;
    let hg = reverse_hypergrad(&tape, &inner, &params.lambda, &val, &outer, SecondOrderMethod::Exact)?;
    let fd = finite_diff_grad(
        |l| {
            let (w, _) = inner_adapt(&inner, l, &params.w, &train, &hp)?;
            autodiff::value(&outer, &w, l, &val)
        },
        &params.lambda,
        1e-6,
    )?;
    Ok(max_relative_error(&hg.p, &fd, 1e-6))
}

pub fn hypergrad_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..3 {
        for k in [1, 3, 5] {
            let name = format!("2-8-3 MLP, K={k}, seed {seed}: max relative error");
            out.push(match hypergrad_relative_error(seed, k) {
                Ok(e) => Check::at_most(name, e, 1e-4),
                Err(e) => Check::failed(name, e),
            });
        }
    }
    out
}

/// Step sizes `α_0, α_0/2, …` over `halvings` halvings.
pub fn halving_steps(alpha0: f64, halvings: usize) -> Vec<f64> {
    (0..=halvings).map(|i| alpha0 / f64::powi(2.0, i as i32)).collect()
}

pub fn theorem1_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let toy = ExpToy::standard();
    let rows = theorem1_check(&toy, &halving_steps(0.4, 4));
    for r in &rows {
        out.push(Check { name: format!("residual at alpha={:.4}", r.alpha), value: r.residual, bound: "reported".into(), pass: true });
    }
    for (i, o) in observed_orders(&rows).into_iter().enumerate() {
        out.push(Check::at_least(format!("observed order, halving {}", i + 1), o, 1.9));
    }
    let limit = theorem1_check(&toy, &[1e-6])[0];
    out.push(Check::at_most("limit gap |E[p] - (g0' + g1')| at alpha=1e-6", limit.limit_gap, 1e-8));
    let lin = LinearToy { a: [vec![0.3, -1.2, 0.7], vec![2.0, 0.1, -0.4]], lambda0: vec![1.0, -2.0, 0.5] };
    let worst = theorem1_check(&lin, &[1.0, 0.1, 1e-3]).iter().map(|r| r.residual).fold(0.0, f64::max);
    out.push(Check::at_most("linear objectives: residual", worst, 1e-10));
    out
}

/// Chi-square p-value of per-item inclusion counts against uniform inclusion.
pub fn reservoir_uniformity_p(capacity: usize, stream: usize, trials: usize, seed: u64) -> f64 {
    let data: Vec<Sample> = (0..stream).map(|i| Sample { x: vec![i as f32].into(), y: 0, task: 0 }).collect();
    let mut counts = vec![0u64; stream];
    let mut rng = Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let mut m = EpisodicMemory::new(capacity);
        reservoir_update(&mut m, &data, &mut rng);
        for s in m.items() {
            counts[s.x[0] as usize] += 1;
        }
    }
    let expected = (trials * capacity) as f64 / stream as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((stream - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

pub fn reservoir_checks() -> Vec<Check> {
    let p = reservoir_uniformity_p(200, 10_000, 2_000, 0);
    vec![Check { name: "capacity 200, stream 10000, 2000 trials: chi-square p".into(), value: p, bound: "> 0.01".into(), pass: p > 0.01 }]
}

/// BTI from the two published summary numbers, via a 2-task matrix whose
/// diagonal mean is `la` and last-row mean is `ra`.
pub fn bti_from_summary(la: f64, ra: f64) -> bicl_core::Result<(f64, f64, f64)> {
    let mut a = AccuracyMatrix::new(2);
    a.set_row(0, &[la])?;
    a.set_row(1, &[2.0 * ra - la, la])?;
    Ok((learning_accuracy(&a)?, retained_accuracy(&a)?, bti(&a)?))
}

pub fn metrics_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for t in 1..8 {
        let mut a = AccuracyMatrix::new(t);
        for i in 0..t {
            let row: Vec<f64> = (0..=i).map(|_| rng.random::<f64>()).collect();
            a.set_row(i, &row).expect("values lie in [0, 1)");
        }
        let (la, ra, b) = (learning_accuracy(&a).unwrap(), retained_accuracy(&a).unwrap(), bti(&a).unwrap());
        worst = worst.max((b - (la - ra)).abs());
    }
    out.push(Check::at_most("BTI - (LA - RA) on random matrices", worst, 0.0));
    match bti_from_summary(0.8715, 0.5855) {
        Ok((la, ra, b)) => {
            out.push(Check::at_most("online MNIST-rotations row: |LA - 87.15|", (100.0 * la - 87.15).abs(), 1e-9));
            out.push(Check::at_most("online MNIST-rotations row: |RA - 58.55|", (100.0 * ra - 58.55).abs(), 1e-9));
            out.push(Check::at_most("online MNIST-rotations row: |BTI - 28.60|", (100.0 * b - 28.60).abs(), 1e-9));
            out.push(Check::at_most("online MNIST-rotations row: |BTI - printed 28.61|", (100.0 * b - 28.61).abs(), 0.02));
        }
        Err(e) => out.push(Check::failed("online MNIST-rotations row", e)),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_parse_by_name() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("nope"), None);
    }

    #[test]
    fn metrics_suite_passes() {
        assert!(metrics_checks().iter().all(|c| c.pass), "{:?}", metrics_checks());
    }

    #[test]
    fn theorem1_suite_passes() {
        let checks = theorem1_checks();
        assert!(checks.iter().all(|c| c.pass), "{checks:#?}");
    }

    #[test]
    fn check_lines_name_the_outcome() {
        assert!(Check::at_most("x", 1.0, 2.0).to_string().starts_with("[PASS] x"));
        assert!(Check::at_least("y", 1.0, 2.0).to_string().starts_with("[FAIL] y"));
    }
}
