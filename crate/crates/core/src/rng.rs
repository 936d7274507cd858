//! Deterministic random-number utilities.
//!
//! Every randomized stage takes an explicit seed; work that fans out across
//! items (generation per source image, per-query augmentation) derives one
//! independent stream per item so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the pipeline.
pub type Rng = ChaCha8Rng;

/// A root generator for a stage.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent per-item stream derived from `(seed, stream)`.
///
/// Streams with the same seed never overlap, so per-item work can run in any
/// order (or in parallel) without changing its output.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
