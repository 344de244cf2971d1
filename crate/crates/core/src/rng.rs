//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a `ChaCha8Rng` derived from the run's
//! master seed plus a stream tag (`"data"`, `"init"`, `"memory"`, ...), so
//! runs are reproducible bit-for-bit across platforms and the streams stay
//! independent of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mix a master seed with a stream tag into an independent 64-bit seed
/// (FNV-1a over the tag, splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in stream.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for a named sub-stream of a master seed.
pub fn stream_rng(master: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// One standard-normal draw (Box-Muller).
pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
