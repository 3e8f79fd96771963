//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 keystream
//! addressed by `(seed, stream_id)`. Sub-streams are derived by mixing a tag
//! into the stream id, so results never depend on how work is scheduled
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Address of an independent, reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// The root stream for a seed.
    pub fn root(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Derives a child stream; distinct tags give statistically independent
    /// streams.
    pub fn child(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Fixed tags for the top-level consumers of a seed. Keeping them in one
/// place prevents two subsystems from silently sharing a stream.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const TRAIN_NOISE: u64 = 2;
    pub const TRAIN_ORDER: u64 = 3;
    pub const DIRECTION: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const DEVICE: u64 = 6;
    pub const TEST_EVAL: u64 = 7;
    pub const DATA: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const ORACLE: u64 = 10;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_address_same_sequence() {
        let a: Vec<u64> = (0..8).map({
            let mut r = RngStream::new(7, 3).rng();
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = RngStream::new(7, 3).rng();
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn children_differ() {
        let root = RngStream::root(1);
        let x: u64 = root.child(1).rng().random();
        let y: u64 = root.child(2).rng().random();
        let z: u64 = root.rng().random();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Guards against accidental changes to the stream derivation.
        let a: u64 = RngStream::new(42, 0).child(5).rng().random();
        let b: u64 = RngStream::new(42, 0).child(5).rng().random();
        assert_eq!(a, b);
        assert_ne!(a, RngStream::new(43, 0).child(5).rng().random::<u64>());
    }
}
