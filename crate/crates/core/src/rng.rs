//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a stable label, never of wall clock or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a.
#[derive(Clone, Debug)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a label into a new seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Fnv::new();
    h.write(label.as_bytes());
    splitmix(seed ^ splitmix(h.finish()))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}

/// Per-instance episode stream: depends only on the run seed and the id.
pub fn episode_rng(seed: u64, instance_id: &str) -> Rng {
    stream(seed, &format!("episode/{instance_id}"))
}
