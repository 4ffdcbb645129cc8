//! Counter-based seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream keyed by
//! `(seed, stream id)`, so parallel seed sweeps and per-component replays are
//! reproducible regardless of scheduling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream ids, one per stochastic component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Trajectory sampling (Monte-Carlo policy gradients, preference pairs).
    Sampling = 0,
    /// Simulated-teacher label draws.
    Teacher = 1,
    /// Random instance generation.
    InstanceGen = 2,
    /// Verification-suite probes.
    Verify = 3,
    /// Monte-Carlo gradient estimation inside driver runs.
    McGradient = 4,
}

/// A seeded ChaCha stream for the given component.
pub fn seed_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Draws an index from a finite distribution by CDF inversion.
///
/// `probs` need not be exactly normalized; the last strictly positive entry
/// absorbs floating-point tail mass.
pub(crate) fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
