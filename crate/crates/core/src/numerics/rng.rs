use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Splittable seed source.
///
/// Every stochastic site draws from a substream derived from the root seed
/// and a stable name, so adding or reordering draws at one site never
/// perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream named `name`.
    pub fn fork(&self, name: &str) -> SeedStream {
        // FNV-1a over the name, then mixed with the parent seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        SeedStream {
            seed: splitmix64(self.seed ^ splitmix64(h)),
        }
    }

    /// Generator for the substream `name`.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.fork(name).seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
