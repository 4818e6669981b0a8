//! Seeded, resumable randomness.
//!
//! Every stochastic choice in the crate (weight init, data order, noise
//! draws) flows through a [`SeedRng`] so that a run is a pure function of
//! its seeds. The underlying ChaCha8 state can be captured and restored
//! byte-exactly, which is what makes checkpoint resume bit-identical.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a [`SeedRng`] position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl SeedRng {
    pub fn from_seed(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream of the same seed (distinct ChaCha stream id).
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeedRng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// One standard normal draw (Box–Muller, second value discarded so the
    /// consumed stream length per call is fixed).
    pub fn standard_normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// Two independent standard normals from one Box–Muller transform.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fill `out` with standard normal draws, pairwise.
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i + 1 < out.len() {
            let (a, b) = self.normal_pair();
            out[i] = a;
            out[i + 1] = b;
            i += 2;
        }
        if i < out.len() {
            out[i] = self.standard_normal();
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn capture(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            word_pos: self.inner.get_word_pos(),
            stream: self.inner.get_stream(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        SeedRng { inner }
    }
}

impl RngState {
    pub const SERIALIZED_LEN: usize = 32 + 16 + 8;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::SERIALIZED_LEN);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out.extend_from_slice(&self.stream.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::SERIALIZED_LEN {
            return Err(Error::Format(format!(
                "rng state: expected {} bytes, got {}",
                Self::SERIALIZED_LEN,
                bytes.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let word_pos = u128::from_le_bytes(bytes[32..48].try_into().unwrap());
        let stream = u64::from_le_bytes(bytes[48..56].try_into().unwrap());
        Ok(RngState {
            seed,
            word_pos,
            stream,
        })
    }
}
