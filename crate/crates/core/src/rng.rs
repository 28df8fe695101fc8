//! Every random draw derives from one user seed; each consumer gets its own
//! ChaCha stream selected by name so adding a consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
