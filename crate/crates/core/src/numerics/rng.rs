use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Splittable, counter-based seed source.
///
/// A node is a 64-bit key. `child(label)` derives a new key with the SplitMix64
/// finaliser applied to `key ^ splitmix64(label)`, and `rng()` opens a ChaCha8
/// stream keyed by `rand_core`'s `seed_from_u64` expansion of the node key. Both
/// algorithms are fixed, so streams are identical on every platform, and the
/// stream for `(seed, step, example)` does not depend on how many values any
/// sibling stream consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(seed)
    }

    pub fn key(self) -> u64 {
        self.0
    }

    pub fn child(self, label: u64) -> Self {
        SeedTree(splitmix64(self.0 ^ splitmix64(label)))
    }

    /// Child addressed by a string label (e.g. "augment").
    pub fn named(self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        self.child(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
