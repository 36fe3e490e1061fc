//! Seeded random streams.
//!
//! Every random decision in a run is drawn from a ChaCha stream keyed by
//! `(seed, stream)`. Cohort draws use one stream per global round, so two
//! algorithms run with the same seed see the same cohorts regardless of how
//! much randomness their solvers consume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a one-off task (initialization, synthetic data).
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based stream for global round `round` of the run keyed by `seed`.
pub fn round_stream(seed: u64, round: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);
    rng
}

/// Standard normal draw by Box-Muller; keeps the crate off `rand_distr`.
pub fn standard_normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    loop {
        let u1: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
