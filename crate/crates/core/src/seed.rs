//! Derivation of per-purpose seeds from one global seed.
//!
//! `derive_seed(global, purpose)` is the first eight bytes (little-endian) of
//! `SHA-256(global.to_le_bytes() ‖ purpose)`. Purposes are short labels such as
//! `"data"`, `"router-init"`, `"fusion-init"`, `"mask"` or `"noise"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(global: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(global: u64, purpose: &str) -> ChaCha8Rng {
    rng(derive_seed(global, purpose))
}
