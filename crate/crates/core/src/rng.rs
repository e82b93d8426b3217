//! Seed derivation. Every random stream in a run is keyed by
//! `(root seed, component name, session index)` so that adding or removing a
//! component never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, component: &str, session: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((component.len() as u64).to_le_bytes());
    hasher.update(component.as_bytes());
    hasher.update(session.to_le_bytes());
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn stream(root: u64, component: &str, session: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, component, session))
}
