//! Splittable, platform-independent random streams.
//!
//! A [`RngStream`] is a `(seed, stream_id)` label. Every consumer creates its
//! own generator from the label, so the sequence a consumer sees depends only
//! on the label and on how many values it draws, never on what other
//! consumers did before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Well-known purposes used when deriving sub-streams.
pub mod purpose {
    pub const DATA: u64 = 0x4441_5441;
    pub const INIT: u64 = 0x494e_4954;
    pub const QUANT_X: u64 = 0x5158;
    pub const QUANT_W: u64 = 0x5157;
    pub const QUANT_G: u64 = 0x5147;
    pub const INJECT: u64 = 0x494e_4a45;
    pub const STEP: u64 = 0x5354_4550;
    pub const PLAN: u64 = 0x504c_414e;
    pub const RANDOM_POLICY: u64 = 0x5241_4e44;
    pub const EVAL: u64 = 0x4556_414c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream for `label`. Distinct labels give statistically
    /// independent streams; the mapping is a pure function of the inputs.
    pub fn derive(&self, label: u64) -> Self {
        let mixed = splitmix64(self.stream_id ^ splitmix64(label.wrapping_add(0x632b_e59b_d9b4_e019)));
        Self {
            seed: self.seed,
            stream_id: mixed,
        }
    }

    /// Convenience for nested derivation, e.g. `(layer, step, purpose)`.
    pub fn derive_path(&self, labels: &[u64]) -> Self {
        labels.iter().fold(*self, |s, &l| s.derive(l))
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
