//! Splittable counter-based random streams.
//!
//! Every consumer of randomness in this crate owns a [`RandomStream`]. A
//! stream is identified by `(seed, stream_id)` and its draw sequence is a
//! pure function of that pair, so reruns are bit-identical and subtrees of a
//! recursive factory can be handed independent streams keyed by their tree
//! path without coordination.

use rand::RngCore;

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; bijective on u64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream: SplitMix64 whose initial state is a strong
/// mix of `(seed, stream_id)`.
///
/// Streams are single-owner. They may be sent between threads but never
/// shared; to hand work to a child task, derive a child stream with
/// [`RandomStream::split`].
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    state: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            state: mix64(mix64(seed) ^ stream_id),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives the `child_index`-th child stream.
    ///
    /// The derivation is pure: the same parent identity and child index give
    /// the same child every call, and distinct child indices give distinct
    /// `stream_id`s (the index map is injective and the finalizer bijective).
    pub fn split(&self, child_index: u64) -> RandomStream {
        let child_id = mix64(self.stream_id ^ child_index.wrapping_mul(GOLDEN).wrapping_add(1));
        RandomStream::new(self.seed, child_id)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform draw on [0, 1) with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// One Bernoulli(p) draw.
    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        Ok(self.uniform() < p)
    }

    /// Bernoulli draw for probabilities already validated by construction.
    #[inline]
    pub(crate) fn coin(&mut self, p: f64) -> bool {
        debug_assert!((0.0..=1.0).contains(&p), "coin({p})");
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        (RandomStream::next_u64(self) >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        RandomStream::next_u64(self)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        let mut chunks = dst.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&RandomStream::next_u64(self).to_le_bytes());
        }
        let rest = chunks.into_remainder();
        if !rest.is_empty() {
            let bytes = RandomStream::next_u64(self).to_le_bytes();
            rest.copy_from_slice(&bytes[..rest.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_identity_identical_sequence() {
        let mut a = RandomStream::new(1, 0);
        let mut b = RandomStream::new(1, 0);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_deterministic_and_injective() {
        let parent = RandomStream::new(1, 0);
        let c0 = parent.split(0);
        let c0_again = parent.split(0);
        assert_eq!(c0.stream_id(), c0_again.stream_id());
        let mut x = c0;
        let mut y = c0_again;
        for _ in 0..32 {
            assert_eq!(x.next_u64(), y.next_u64());
        }
        let ids: Vec<u64> = (0..1000).map(|k| parent.split(k).stream_id()).collect();
        let mut dedup = ids.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), ids.len());
    }

    #[test]
    fn bernoulli_degenerate_and_domain() {
        let mut s = RandomStream::new(7, 7);
        for _ in 0..200 {
            assert!(!s.bernoulli(0.0).unwrap());
            assert!(s.bernoulli(1.0).unwrap());
        }
        assert!(s.bernoulli(-0.1).is_err());
        assert!(s.bernoulli(1.1).is_err());
    }

    #[test]
    fn bernoulli_mean_within_binomial_error() {
        let mut s = RandomStream::new(42, 0);
        let n = 100_000usize;
        let p = 0.3;
        let mut heads = 0u64;
        for _ in 0..n {
            if s.bernoulli(p).unwrap() {
                heads += 1;
            }
        }
        let mean = heads as f64 / n as f64;
        let tol = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((mean - p).abs() < tol, "mean {mean} vs {p} +/- {tol}");
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let parent = RandomStream::new(3, 1);
        let mut a = parent.split(0);
        let mut b = parent.split(1);
        assert_ne!(a.stream_id(), b.stream_id());
        let n = 10_000;
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.uniform();
            let y = b.uniform();
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let nf = n as f64;
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let vx = sxx / nf - (sx / nf).powi(2);
        let vy = syy / nf - (sy / nf).powi(2);
        let r = cov / (vx * vy).sqrt();
        assert!(r.abs() < 0.05, "sibling correlation {r}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = RandomStream::new(9, 9);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
