//! Seeded, splittable random streams.
//!
//! Every consumer draws from ChaCha8 keyed by the run seed, with a distinct
//! stream id per purpose, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Stream ids for the independent purposes a run draws randomness for.
pub mod streams {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_TEST: u64 = 2;
    pub const OUTLIER_TRAIN: u64 = 3;
    pub const OUTLIER_TEST: u64 = 4;
    pub const INIT_GENERATOR: u64 = 5;
    pub const INIT_POTENTIAL: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const METRIC: u64 = 9;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Position of a stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = stream(self.seed, self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
