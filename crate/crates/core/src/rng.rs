//! Split-stream random number generation.
//!
//! Every stochastic unit of work (a Monte Carlo replicate, an MCMC chain) gets
//! its own ChaCha8 stream. The key is derived from the master seed and the
//! stream id selects one of 2^64 independent ChaCha streams, so a replicate's
//! draws depend only on `(seed, stream)` and never on scheduling order or the
//! number of worker threads.
//!
//! Composite ids such as `(cell, replicate)` are folded into one `u64` with
//! [`stream_id`], which chains SplitMix64 finalisation over the components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for stream `stream` under master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an ordered list of indices into a single stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5851_F42D_4C95_7F2D, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}
