//! Named deterministic RNG streams.
//!
//! Every randomized component draws from its own stream keyed by
//! (run seed, component name). Components therefore never share a
//! cursor: adding or removing one draw site leaves every other
//! component's numbers untouched, and two runs that share a seed get
//! identical weights regardless of which criterion-specific extras
//! each of them initializes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Stream for one named component under one run seed.
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let name_hash = fnv1a64(component.as_bytes());
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&name_hash.to_le_bytes());
    key[16..24].copy_from_slice(&(seed ^ name_hash).to_le_bytes());
    key[24..32].copy_from_slice(&name_hash.rotate_left(32).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
