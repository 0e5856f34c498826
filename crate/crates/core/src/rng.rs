//! Seed handling.
//!
//! Every random draw in the toolkit comes from one user-facing seed. The seed
//! is split into independent ChaCha streams by purpose, so that changing, for
//! example, the number of mask-training iterations never shifts the noise used
//! to sample images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from a single seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Training-set draws for the teacher.
    Data = 1,
    /// Teacher initialisation, timesteps and noise.
    Teacher = 2,
    /// Held-out evaluation batch for the teacher.
    HeldOut = 3,
    /// Mask training: initial noise of the training seeds and relaxation samples.
    Mask = 4,
    /// Sampling: initial noise and ancestral noise, one stream per sample seed.
    Sampling = 5,
    /// Metric estimation (permutation tests and the like).
    Evaluation = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
