//! Deterministic random substreams.
//!
//! Every random draw in training is taken from a ChaCha stream keyed by the
//! run seed plus a small tuple of counters (purpose, step, row, ...), so
//! results never depend on evaluation order and a run can resume from a step
//! counter alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` and `keys` into a fresh, independent stream.
pub fn substream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ splitmix(k.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    StreamRng::seed_from_u64(h)
}

/// Stream purposes, kept distinct so different consumers never share draws.
pub mod purpose {
    pub const INIT_GENERATOR: u64 = 1;
    pub const INIT_CRITIC: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const ROLLOUT: u64 = 5;
    pub const CRITIC_BATCH: u64 = 6;
    pub const CRITIC_FAKE: u64 = 7;
    pub const SCENE: u64 = 8;
    pub const CAPTION: u64 = 9;
    pub const EVAL: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, &[1, 2]).random();
        let b: u64 = substream(7, &[1, 2]).random();
        let c: u64 = substream(7, &[2, 1]).random();
        let d: u64 = substream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
