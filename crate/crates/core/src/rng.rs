//! Named random substreams.
//!
//! A [`SeedTree`] is a 64-bit key. Children are derived by hashing the parent
//! key with a name or an index, so the numbers drawn at one site never depend
//! on how many numbers were drawn elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self(mix(seed))
    }

    pub fn key(self) -> u64 {
        self.0
    }

    pub fn child(self, name: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        Self(mix(self.0 ^ mix(h)))
    }

    pub fn index(self, i: u64) -> Self {
        Self(mix(self.0.rotate_left(17) ^ mix(i.wrapping_add(0xA5A5_A5A5))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_independent_of_draw_order() {
        let root = SeedTree::new(7);
        let mut a = root.child("a").rng();
        let _: u64 = a.random();
        let x: u64 = root.child("b").rng().random();
        let y: u64 = SeedTree::new(7).child("b").rng().random();
        assert_eq!(x, y);
        assert_ne!(root.child("a"), root.child("b"));
        assert_ne!(root.index(0), root.index(1));
        assert_ne!(root.child("x").index(3), root.index(3).child("x"));
    }
}
