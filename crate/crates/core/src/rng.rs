//! Seeded, splittable random streams.
//!
//! A [`SeedStream`] is a 64-bit seed. Draws come from ChaCha8 seeded with it
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`). Child streams are derived with
//! the SplitMix64 finalizer over `seed ^ (index * 0x9E3779B97F4A7C15)`, so a
//! dataset seed fans out into per-sample streams that do not depend on the
//! order or number of workers consuming them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    /// Independent child stream number `index`.
    pub fn split(self, index: u64) -> SeedStream {
        SeedStream(splitmix64(self.0 ^ index.wrapping_mul(GOLDEN)))
    }

    /// Child stream keyed by a name, for readable call sites.
    pub fn named(self, name: &str) -> SeedStream {
        let key = name
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.split(key)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
