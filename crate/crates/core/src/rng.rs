//! Platform-stable random streams.
//!
//! All randomness in the pipeline comes from [`SplitMix64`], a counter-based
//! generator: draw `k` of a stream seeded with `s` is `mix(s + (k + 1) * GAMMA)`.
//! Streams for a `(video, kind, r)` triple are keyed by [`derive_seed`].

use crate::hash::Fnv1a;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform integer in `[0, bound)`. Rejection sampling, so unbiased.
    ///
    /// Panics if `bound == 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        // Largest multiple of `bound` that fits; draws above it are rejected.
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Independent child stream; advances the parent by one draw.
    pub fn split(&mut self) -> Self {
        Self::new(mix(self.next_u64() ^ GAMMA.rotate_left(17)))
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Seed for the stream of one perturbation: FNV-1a over
/// `global_seed 0x1F video_id 0x1F kind 0x1F r`, numbers in decimal.
pub fn derive_seed(global_seed: u64, video_id: &str, kind: &str, r: u32) -> u64 {
    let mut h = Fnv1a::new();
    h.update(global_seed.to_string().as_bytes())
        .update(&[0x1f])
        .update(video_id.as_bytes())
        .update(&[0x1f])
        .update(kind.as_bytes())
        .update(&[0x1f])
        .update(r.to_string().as_bytes());
    h.finish()
}

pub fn derive_rng(global_seed: u64, video_id: &str, kind: &str, r: u32) -> SplitMix64 {
    SplitMix64::new(derive_seed(global_seed, video_id, kind, r))
}
