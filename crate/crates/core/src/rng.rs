//! Seed fan-out: one master seed, one independent ChaCha stream per component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Components that draw random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Reservoir = 3,
    Sampling = 4,
    Noise = 5,
    Evaluation = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        SeedStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn rng(&self, stream: Stream) -> Rng {
        self.indexed(stream, 0)
    }

    /// A further sub-stream, e.g. one per task.
    pub fn indexed(&self, stream: Stream, index: u32) -> Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.master);
        r.set_stream(((stream as u64) << 32) | index as u64);
        r
    }

    /// A plain `u64` seed for a sub-stream, for APIs that take seeds.
    pub fn seed(&self, stream: Stream, index: u32) -> u64 {
        use rand::RngCore;
        self.indexed(stream, index).next_u64()
    }
}

/// Generators used during training.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub reservoir: Rng,
    pub sampling: Rng,
    pub noise: Rng,
}

impl TrainRngs {
    pub fn new(seeds: &SeedStreams) -> Self {
        TrainRngs {
            reservoir: seeds.rng(Stream::Reservoir),
            sampling: seeds.rng(Stream::Sampling),
            noise: seeds.rng(Stream::Noise),
        }
    }
}
