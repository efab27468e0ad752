//! Named, seeded random streams.
//!
//! Every consumer of randomness (data order, gate noise, initialization,
//! per-sample rendering) draws from its own stream derived from the master
//! seed and a name, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a(name.as_bytes()))
}

pub fn derive_indexed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, name) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(master: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name))
}

pub fn indexed_stream(master: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_indexed(master, name, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_named_and_reproducible() {
        let a: u64 = stream(7, "init").random();
        let b: u64 = stream(7, "init").random();
        let c: u64 = stream(7, "noise").random();
        let d: u64 = stream(8, "init").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(derive_indexed(1, "x", 0), derive_indexed(1, "x", 1));
    }
}
