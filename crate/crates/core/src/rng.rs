//! Named random substreams derived from one master seed.
//!
//! Every consumer of randomness (exposures, noise, assignment, strata, Monte
//! Carlo replication `i`, ...) draws from its own ChaCha stream. The stream
//! id is a pure function of the substream name and index, so two substreams
//! never share state and results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    Exposure,
    Noise,
    Preference,
    Assignment,
    Strata,
    FragmentIds,
    MixedSubset,
    /// Replication `i` of a Monte Carlo loop.
    McRep(u64),
}

impl Substream {
    fn id(self) -> u64 {
        const REP_TAG: u64 = 0x100 << 48;
        match self {
            Substream::Exposure => 1,
            Substream::Noise => 2,
            Substream::Preference => 3,
            Substream::Assignment => 4,
            Substream::Strata => 5,
            Substream::FragmentIds => 6,
            Substream::MixedSubset => 7,
            Substream::McRep(i) => REP_TAG | (i & ((1 << 48) - 1)),
        }
    }
}

pub fn substream(master_seed: u64, which: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(which.id());
    rng
}

/// Seed for replication `rep`, used when a whole population is regenerated per replication.
pub fn rep_seed(master_seed: u64, rep: u64) -> u64 {
    use rand::RngCore;
    substream(master_seed, Substream::McRep(rep)).next_u64()
}
