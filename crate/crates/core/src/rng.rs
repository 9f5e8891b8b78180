//! Seeded, counter-based random streams.
//!
//! Every stochastic op takes an explicit generator. Generators are ChaCha8
//! keyed by `seed` (expanded with `SeedableRng::seed_from_u64`) with the
//! ChaCha stream id selecting an independent sequence. Stream ids are
//! partitioned by purpose so that, for example, sample `i` of a dataset and
//! training step `i` never share randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

/// Dataset samples: stream = `SAMPLE_STREAM | sample_index`.
pub const SAMPLE_STREAM: u64 = 0;
/// Per-identity generator state (prototypes, text embeddings).
pub const IDENTITY_STREAM: u64 = 1 << 40;
/// Fixed dataset-wide state (modality bases).
pub const DATASET_STREAM: u64 = 1 << 41;
/// Model parameter initialization.
pub const INIT_STREAM: u64 = 1 << 42;
/// Training step `t`: stream = `STEP_STREAM | t`.
pub const STEP_STREAM: u64 = 1 << 43;

pub fn stream(seed: u64, stream: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
