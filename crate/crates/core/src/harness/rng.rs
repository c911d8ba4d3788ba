//! Counter-based random streams keyed by `(master_seed, trial, role)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Each role of each trial gets its own stream,
/// so adding draws to one role never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Data = 0,
    Uniform = 1,
    Cost = 2,
    Selection = 3,
}

pub fn stream(master_seed: u64, trial: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial.wrapping_mul(16).wrapping_add(role as u64));
    rng
}
