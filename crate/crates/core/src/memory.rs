//! Reservoir episodic memory and meta-batch sampling.

use alloc::vec::Vec;

use rand::Rng;

use crate::continuum::Sample;
use crate::{Error, Result};

/// The only two ways a trainer may touch a memory store.
pub trait Replay {
    fn reservoir_update<R: Rng + ?Sized>(&mut self, batch: &[Sample], rng: &mut R);

    fn batch_sample<R: Rng + ?Sized>(&self, current: &[Sample], b: usize, batch_size: usize, rng: &mut R)
        -> Vec<Vec<Sample>>;
}

/// Bounded buffer filled by reservoir sampling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodicMemory {
    capacity: usize,
    items: Vec<Sample>,
    seen: u64,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Self {
        EpisodicMemory { capacity, items: Vec::with_capacity(capacity), seen: 0 }
    }

    /// Restores a snapshot.
    pub fn from_parts(capacity: usize, items: Vec<Sample>, seen: u64) -> Result<Self> {
        if items.len() > capacity || (seen as usize) < items.len() {
            return Err(Error::invalid("memory snapshot violates capacity or seen count"));
        }
        Ok(EpisodicMemory { capacity, items, seen })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items ever offered.
    pub fn seen(&self) -> u64 {
        self.seen
    }
}

impl Replay for EpisodicMemory {
    fn reservoir_update<R: Rng + ?Sized>(&mut self, batch: &[Sample], rng: &mut R) {
        reservoir_update(self, batch, rng)
    }

    fn batch_sample<R: Rng + ?Sized>(
        &self,
        current: &[Sample],
        b: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Vec<Vec<Sample>> {
        batch_sample(current, self, b, batch_size, rng)
    }
}

/// Offers every sample of `batch`: append while below capacity, otherwise the
/// `n`-th offered item replaces a uniform slot with probability `N_max / n`.
pub fn reservoir_update<R: Rng + ?Sized>(m: &mut EpisodicMemory, batch: &[Sample], rng: &mut R) {
    for s in batch {
        m.seen += 1;
        if m.items.len() < m.capacity {
            m.items.push(s.clone());
        } else if m.capacity > 0 {
            let j = rng.random_range(0..m.seen);
            if (j as usize) < m.capacity {
                m.items[j as usize] = s.clone();
            }
        }
    }
}

/// `b` batches of `batch_size` drawn with replacement from `M ∪ B`. When `B` is
/// nonempty the first `max(1, batch_size / 2)` slots of every batch come from `B`.
pub fn batch_sample<R: Rng + ?Sized>(
    current: &[Sample],
    m: &EpisodicMemory,
    b: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<Sample>> {
    let union = m.items.len() + current.len();
    let pick = |i: usize| if i < m.items.len() { &m.items[i] } else { &current[i - m.items.len()] };
    let fresh = if current.is_empty() { 0 } else { (batch_size / 2).max(1) };
    (0..b)
        .map(|_| {
            if union == 0 {
                return Vec::new();
            }
            (0..batch_size)
                .map(|slot| {
                    if slot < fresh {
                        current[rng.random_range(0..current.len())].clone()
                    } else {
                        pick(rng.random_range(0..union)).clone()
                    }
                })
                .collect()
        })
        .collect()
}

/// `M = M^tr ∪ M^val`, kept as two disjoint stores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryPair<M = EpisodicMemory> {
    pub train: M,
    pub val: M,
}

impl MemoryPair<EpisodicMemory> {
    /// Splits a total budget, giving `round(train_fraction · total)` to the train store.
    pub fn with_budget(total: usize, train_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::invalid("memory train fraction outside [0, 1]"));
        }
        let tr = libm::round(train_fraction * total as f64) as usize;
        Ok(MemoryPair { train: EpisodicMemory::new(tr), val: EpisodicMemory::new(total - tr) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn stream(n: usize) -> Vec<Sample> {
        (0..n).map(|i| Sample { x: vec![i as f32].into(), y: 0, task: 0 }).collect()
    }

    fn id(s: &Sample) -> usize {
        s.x[0] as usize
    }

    fn chi_square_p(counts: &[u64], expected: f64) -> f64 {
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn fills_in_order_below_capacity() {
        let mut m = EpisodicMemory::new(200);
        reservoir_update(&mut m, &stream(100), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.items().iter().map(id).collect::<Vec<_>>(), (0..100).collect::<Vec<_>>());
        assert_eq!(m.seen(), 100);
    }

    #[test]
    fn capacity_one_retains_uniformly() {
        let n = 10;
        let data = stream(n);
        let trials = 20_000;
        let mut counts = vec![0u64; n];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..trials {
            let mut m = EpisodicMemory::new(1);
            reservoir_update(&mut m, &data, &mut rng);
            counts[id(&m.items()[0])] += 1;
        }
        let p = 1.0 / n as f64;
        let se = libm::sqrt(trials as f64 * p * (1.0 - p));
        for c in counts {
            assert!((c as f64 - trials as f64 * p).abs() < 3.0 * se, "count {c}");
        }
    }

    #[test]
    fn inclusion_is_uniform_chi_square() {
        let (cap, n, trials) = (200, 10_000, 2_000);
        let data = stream(n);
        let mut counts = vec![0u64; n];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..trials {
            let mut m = EpisodicMemory::new(cap);
            reservoir_update(&mut m, &data, &mut rng);
            for s in m.items() {
                counts[id(s)] += 1;
            }
        }
        let p = chi_square_p(&counts, (trials * cap) as f64 / n as f64);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn capacity_never_exceeded_under_a_million_offers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = EpisodicMemory::new(37);
        let data = stream(64);
        let mut offered = 0u64;
        while offered < 1_000_000 {
            let k = rng.random_range(0..64);
            reservoir_update(&mut m, &data[..k], &mut rng);
            offered += k as u64;
            assert!(m.len() <= 37);
        }
        assert_eq!(m.seen(), offered);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut m = EpisodicMemory::new(0);
        reservoir_update(&mut m, &stream(10), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(m.is_empty());
        assert_eq!(m.seen(), 10);
    }

    #[test]
    fn reproducible_under_seed() {
        let run = || {
            let mut m = EpisodicMemory::new(20);
            reservoir_update(&mut m, &stream(500), &mut ChaCha8Rng::seed_from_u64(4));
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_memory_samples_from_batch() {
        let m = EpisodicMemory::new(10);
        let b = stream(5);
        let batches = batch_sample(&b, &m, 4, 7, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(batches.len(), 4);
        assert!(batches.iter().all(|x| x.len() == 7 && x.iter().all(|s| id(s) < 5)));
        assert!(batch_sample(&b, &m, 0, 7, &mut ChaCha8Rng::seed_from_u64(5)).is_empty());
    }

    #[test]
    fn empty_batch_samples_from_memory_only() {
        let mut m = EpisodicMemory::new(10);
        reservoir_update(&mut m, &stream(3), &mut ChaCha8Rng::seed_from_u64(0));
        let batches = batch_sample(&[], &m, 2, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(batches.iter().all(|x| x.len() == 4));
        let none = batch_sample(&[], &EpisodicMemory::new(3), 2, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(none.iter().all(|x| x.is_empty()));
    }

    #[test]
    fn every_batch_holds_a_current_sample() {
        let mut m = EpisodicMemory::new(50);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        reservoir_update(&mut m, &stream(50), &mut rng);
        let b: Vec<Sample> = (1000..1003).map(|i| Sample { x: vec![i as f32].into(), y: 0, task: 1 }).collect();
        for batch in batch_sample(&b, &m, 200, 5, &mut rng) {
            assert!(batch.iter().any(|s| id(s) >= 1000));
        }
    }

    #[test]
    fn half_of_each_batch_is_fresh() {
        let mut m = EpisodicMemory::new(50);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        reservoir_update(&mut m, &stream(50), &mut rng);
        let b: Vec<Sample> = (1000..1004).map(|i| Sample { x: vec![i as f32].into(), y: 0, task: 1 }).collect();
        for (size, fresh) in [(1, 1), (2, 1), (7, 3), (10, 5)] {
            for batch in batch_sample(&b, &m, 20, size, &mut rng) {
                assert!(batch[..fresh].iter().all(|s| id(s) >= 1000));
            }
        }
    }

    #[test]
    fn union_selection_is_uniform() {
        let mut m = EpisodicMemory::new(900);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        reservoir_update(&mut m, &stream(900), &mut rng);
        let b: Vec<Sample> = (900..1000).map(|i| Sample { x: vec![i as f32].into(), y: 0, task: 1 }).collect();
        let draws = 100_000;
        let mut counts = vec![0u64; 1000];
        for batch in batch_sample(&b, &m, draws, 10, &mut rng) {
            for s in &batch {
                counts[id(s)] += 1;
            }
        }
        // free slots: 5 per batch over 1000 items; fresh slots: 5 per batch over 100 items
        let free = draws as f64 * 5.0 / 1000.0;
        let mem_total: u64 = counts[..900].iter().sum();
        let mem_p = 900.0 / 1000.0;
        let slots = draws as f64 * 5.0;
        let se = libm::sqrt(slots * mem_p * (1.0 - mem_p));
        assert!((mem_total as f64 - slots * mem_p).abs() < 3.0 * se);
        assert!(chi_square_p(&counts[..900], free) > 0.01);
        assert!(chi_square_p(&counts[900..], free + draws as f64 * 5.0 / 100.0) > 0.01);
    }

    #[test]
    fn budget_split() {
        let p = MemoryPair::with_budget(500, 0.5).unwrap();
        assert_eq!((p.train.capacity(), p.val.capacity()), (250, 250));
        let q = MemoryPair::with_budget(5, 0.8).unwrap();
        assert_eq!((q.train.capacity(), q.val.capacity()), (4, 1));
        assert!(MemoryPair::with_budget(5, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn size_and_seen_invariants(cap in 0usize..30, sizes in proptest::collection::vec(0usize..40, 0..30), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = EpisodicMemory::new(cap);
            let data = stream(40);
            for k in sizes {
                reservoir_update(&mut m, &data[..k], &mut rng);
                prop_assert!(m.len() <= cap);
                prop_assert!(m.seen() >= m.len() as u64);
            }
        }
    }
}
