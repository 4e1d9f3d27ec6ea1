//! Per-purpose sub-seeds derived from one master seed.
//!
//! Every random stream in a run is a `ChaCha8Rng` seeded from
//! `derive(master, purpose, a, b)`, so the stream for (round 7, client 3)
//! does not depend on which thread trained client 2 or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Selection = 2,
    Heterogeneity = 3,
    ClientBatches = 4,
    Corpus = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn rng(master: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, purpose, a, b))
}
