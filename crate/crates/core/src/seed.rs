//! Splittable seed derivation.
//!
//! A run has one global seed; every consumer (initialisation, training tasks,
//! evaluation tasks, ...) derives its own stream from a label and an index, so
//! adding a new consumer never shifts the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Stream for a named component.
    pub fn child(self, label: &str) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(fnv1a(label))))
    }

    /// The `i`-th stream below this one.
    pub fn index(self, i: u64) -> Self {
        Self(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0xA5A5_A5A5_5A5A_5A5A))))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
