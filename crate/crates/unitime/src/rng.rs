//! Seedable randomness.
//!
//! Every stochastic component of the crate (parameter initialization, mask
//! generation, batch sampling, probe selection, data synthesis) draws from a
//! ChaCha8 generator derived from one master seed, each on its own stream.
//! Given the same seed on the same platform, every run is bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Independent substreams of the master seed. The numeric values are part of
/// the determinism contract: changing them changes every seeded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 1,
    /// Batch-level domain and row sampling.
    Sampling = 2,
    /// Training-time mask vectors.
    Masking = 3,
    /// Probe-window selection for zero-shot instruction selection.
    Probe = 4,
    /// Test-window sampling for representation export.
    Export = 5,
    /// Synthetic data generation.
    Synth = 6,
}

/// A generator for `stream` derived from the master `seed`.
pub fn for_stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a = for_stream(7, Stream::Init);
        let mut b = for_stream(7, Stream::Init);
        let mut c = for_stream(7, Stream::Sampling);
        let xs: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..4).map(|_| c.random()).collect();
        assert_eq!(xs, ys, "same seed+stream must replay identically");
        assert_ne!(xs, zs, "different streams must decorrelate");
    }
}
