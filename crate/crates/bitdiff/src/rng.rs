//! Counter-based splittable pseudo-random generator.
//!
//! Every draw is a pure function of `(seed, stream id, draw index)`, so a
//! computation partitioned across derived streams replays bit-identically
//! regardless of evaluation order or worker count. SplitMix64 finalizer
//! (Sebastiano Vigna); non-cryptographic.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SEED_SALT: u64 = 0x6A09_E667_F3BC_C909;
const STREAM_SALT: u64 = 0xBB67_AE85_84CA_A73B;
const DERIVE_SALT: u64 = 0x517C_C1B7_2722_0A95;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a label. Used to hand distinct
/// top-level seeds to independent pipeline stages (dataset splits, workers).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(mix64(seed ^ SEED_SALT) ^ mix64(label ^ DERIVE_SALT))
}

/// A stream of pseudo-random draws identified by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    base: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let base = mix64(mix64(seed ^ SEED_SALT) ^ mix64(stream ^ STREAM_SALT));
        Self { seed, stream, base, counter: 0 }
    }

    /// Child stream under the same seed. Children of distinct labels (and of
    /// distinct parents) are statistically independent.
    pub fn derive(&self, label: u64) -> Self {
        Self::with_stream(self.seed, mix64(self.stream ^ mix64(label ^ DERIVE_SALT)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Draw index of the next value; `(seed, stream, counter)` pins it.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    fn value_at(&self, index: u64) -> u64 {
        mix64(self.base.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.value_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// One Bernoulli(p) draw. p = 0 never fires, p = 1 always fires.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
