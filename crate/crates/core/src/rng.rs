//! Counter-keyed random streams: every stream is a pure function of the run
//! seed and a small key, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives an independent stream for `(seed, label, counters…)`.
pub fn stream(seed: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ fnv1a(label));
    for &c in counters {
        h = splitmix(h ^ c);
    }
    ChaCha8Rng::seed_from_u64(h)
}
