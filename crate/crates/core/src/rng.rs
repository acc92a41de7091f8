//! Seeded, per-component random streams.
//!
//! Every stochastic decision draws from a stream derived from `(seed, component, index)`, so a
//! run is reproducible and resumable from the iteration counter alone: no generator state has
//! to be checkpointed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumers of randomness; each gets an independent stream family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    WeightInit,
    DataOrder,
    FfpeDraw,
    PatchSample,
    Synthesis,
    SplitAssignment,
    KidSubsets,
    FeatureExtractor,
}

impl Component {
    fn tag(self) -> u64 {
        match self {
            Component::WeightInit => 0x01,
            Component::DataOrder => 0x02,
            Component::FfpeDraw => 0x03,
            Component::PatchSample => 0x04,
            Component::Synthesis => 0x05,
            Component::SplitAssignment => 0x06,
            Component::KidSubsets => 0x07,
            Component::FeatureExtractor => 0x08,
        }
    }
}

/// Root of all random streams for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

/// Fixes the seed of every stochastic component (weight init, data order, patch sampling, ...).
pub fn seed_all(seed: u64) -> RngStreams {
    RngStreams { seed }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStreams {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(component, index)`.
    pub fn stream(&self, component: Component, index: u64) -> ChaCha8Rng {
        let key = splitmix64(splitmix64(self.seed ^ component.tag().rotate_left(56)) ^ index);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(component.tag());
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = seed_all(7).stream(Component::PatchSample, 3).gen();
        let b: u64 = seed_all(7).stream(Component::PatchSample, 3).gen();
        let c: u64 = seed_all(8).stream(Component::PatchSample, 3).gen();
        let d: u64 = seed_all(7).stream(Component::PatchSample, 4).gen();
        let e: u64 = seed_all(7).stream(Component::DataOrder, 3).gen();
        assert_eq!(a, b);
        assert!(a != c && a != d && a != e);
    }
}
