//! Splittable seeding.
//!
//! Every random stream in the crate is derived from a master seed and a
//! human-readable label: the ChaCha8 key is `SHA-256(seed_le_bytes ‖ label)`.
//! Any replicate, site or pair can therefore be regenerated in isolation,
//! and results do not depend on how work is scheduled across threads.
//!
//! Labels in use:
//!
//! - `perturb`: per-site correlation perturbations of a mixture design
//! - `site/{s}`: data for site `s` of a simulated panel
//! - `pair/{var}/{a}|{b}`: Monte Carlo draws of the expected divergence,
//!   with `a <= b` the two site ids in lexicographic order
//! - `bootstrap/{site}/{var}/{b}`: bootstrap replicate `b`
//! - `pam/restart/{r}`: PAM initial medoids for restart `r`
//! - `experiment/cell/{c}/rep/{r}`: seed of one experiment replicate

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn digest(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// RNG for the stream `label` under master `seed`.
pub fn substream(seed: u64, label: &str) -> StreamRng {
    ChaCha8Rng::from_seed(digest(seed, label))
}

/// A derived 64-bit seed, for handing a child computation its own master seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let d = digest(seed, label);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
