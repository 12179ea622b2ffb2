//! Deterministic random streams.
//!
//! Every random draw in the crate flows through [`Rng`], a ChaCha8 stream
//! cipher generator. Streams are addressed by a [`StreamKey`]: a root seed
//! plus a chain of tags mixed with SplitMix64. Deriving streams by key
//! (rather than splitting one sequential generator) keeps sampling
//! reproducible under resumption and independent of thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Address of a derived random stream: root seed plus a tag chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed))
    }

    /// Derive a child stream. Children with distinct tags are independent.
    pub fn child(self, tag: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(tag)))
    }

    /// Convenience for string-addressed streams (parameter names, phases).
    pub fn child_str(self, tag: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        self.child(h)
    }

    pub fn rng(self) -> Rng {
        Rng::from_key(self)
    }
}

/// Seedable 64-bit generator: ChaCha8 keyed by a [`StreamKey`].
///
/// Uniform doubles take the top 53 bits of one `u64`; normal draws use the
/// Box-Muller transform with the second value cached, so each normal
/// consumes a fixed position in the stream.
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn from_key(key: StreamKey) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(key.0),
            spare_normal: None,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::from_key(StreamKey::root(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n). Multiply-shift; bias is O(n / 2^64).
    pub fn below(&mut self, n: usize) -> usize {
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
