//! Counter-based random streams.
//!
//! A [`RandomStream`] is identified by `(seed, stream_id)`; its `k`-th 64-bit
//! draw is a pure function of `(seed, stream_id, k)`. The keystream comes from
//! ChaCha8, whose stream selector and word position give exactly that
//! addressing. Sub-streams are derived by hashing a label into a new id, so
//! independent consumers never share draws.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        rng.set_word_pos(0);
        Self {
            seed,
            stream_id,
            counter: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Reposition the stream so the next draw is draw number `counter`.
    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
        self.rng.set_word_pos(u128::from(counter) * 2);
    }

    /// A child stream keyed by `label`, independent of this stream's position.
    pub fn derive(&self, label: u64) -> RandomStream {
        RandomStream::new(self.seed, mix64(self.stream_id ^ mix64(label.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// A child stream keyed by a string label.
    pub fn derive_named(&self, label: &str) -> RandomStream {
        self.derive(fnv1a64(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; always consumes two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard Gumbel noise `-ln(-ln u)` with `u` clamped to `[1e-10, 1 - 1e-10]`.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }

    /// Standard logistic noise `ln u - ln(1 - u)`.
    pub fn logistic(&mut self) -> f64 {
        let u = self.uniform_open();
        u.ln() - (-u).ln_1p()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is below 2^-64 * n.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-10, 1.0 - 1e-10);
    -(-u.ln()).ln()
}

/// Stable 64-bit label for deriving streams from names.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
