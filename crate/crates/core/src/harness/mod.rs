//! Experiment generation and evaluation: planted-anomaly streams, offline
//! comparators, regret ledgers and synthetic feedback.

mod bounds;
mod comparator;
mod evaluate;
mod ledger;
mod oracle;
mod stream;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bounds::{
    mistake_bound, sparse_feedback_mistake_bound, static_regret_bound, tracking_regret_bound, RegretConstants,
};
pub use comparator::{
    best_static_tau, best_static_theta, count_mistakes, variation, PiecewiseComparator, PrefixBestTheta,
};
pub use evaluate::{evaluate_run, RunReport};
pub use ledger::RegretLedger;
pub use oracle::{OracleKind, SyntheticOracle};
pub use stream::{corrupt_stream, generate_stream, CleanStream, PiecewiseSpec, Segment};

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngPurpose {
    SegmentMeans = 0,
    CleanSamples = 1,
    ChannelNoise = 2,
    QueryCoins = 3,
    Oracle = 4,
}

pub fn seeded_rng(seed: u64, purpose: RngPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
