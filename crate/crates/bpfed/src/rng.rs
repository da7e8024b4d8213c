//! Deterministic random-stream derivation.
//!
//! Every source of randomness in an experiment is a ChaCha stream derived
//! from the run seed plus a purpose label and up to two integer coordinates
//! (client id, round). Streams for different purposes never overlap, so a
//! rerun with the same seed and config reproduces every draw bit for bit,
//! regardless of thread scheduling or the order in which clients finish.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash; folds purpose labels into seeds and fingerprints
/// run configurations. Implemented inline so stream derivation never
/// depends on the standard library's unspecified hasher internals.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent stream from `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(domain.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Mini-batch shuffling for one client-round.
pub fn client_batches(seed: u64, client_id: usize, round: usize) -> ChaCha8Rng {
    stream(seed, "client-batches", client_id as u64, round as u64)
}

/// Reparameterization noise for one client-round. Kept separate from the
/// batch stream so point-mass (no-noise) and variational runs see identical
/// mini-batch sequences.
pub fn client_noise(seed: u64, client_id: usize, round: usize) -> ChaCha8Rng {
    stream(seed, "client-noise", client_id as u64, round as u64)
}

/// Server-side participant sampling for one round.
pub fn server_round(seed: u64, round: usize) -> ChaCha8Rng {
    stream(seed, "server", round as u64, 0)
}

/// Initialization of the global shared factor.
pub fn init_shared(seed: u64) -> ChaCha8Rng {
    stream(seed, "init-shared", 0, 0)
}

/// Initialization of one client's personalized factor.
pub fn init_personal(seed: u64, client_id: usize) -> ChaCha8Rng {
    stream(seed, "init-personal", client_id as u64, 0)
}

/// Label-skew partitioning of a dataset.
pub fn partition(seed: u64) -> ChaCha8Rng {
    stream(seed, "partition", 0, 0)
}

/// Synthetic data generation.
pub fn synth(seed: u64) -> ChaCha8Rng {
    stream(seed, "synth", 0, 0)
}

/// Predictive sampling during evaluation of one client at one round.
pub fn eval(seed: u64, client_id: usize, round: usize) -> ChaCha8Rng {
    stream(seed, "eval", client_id as u64, round as u64)
}

/// Novel-client initialization and training noise.
pub fn novel(seed: u64) -> ChaCha8Rng {
    stream(seed, "novel", 0, 0)
}
