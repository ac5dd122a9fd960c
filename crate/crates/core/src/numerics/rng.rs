//! Named, seeded random streams.
//!
//! A stream is identified by `(seed, stream_id)`; its draws depend on nothing
//! else, so the same pair reproduces the same sequence on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: String,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        RngStream {
            seed,
            stream_id: stream_id.into(),
        }
    }

    /// 64-bit key identifying this stream.
    pub fn key(&self) -> u64 {
        splitmix64(self.seed ^ fnv1a(self.stream_id.as_bytes()))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }

    /// A child stream, e.g. `init.derive("base.word.0.w_qk")`.
    pub fn derive(&self, label: impl std::fmt::Display) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: format!("{}/{}", self.stream_id, label),
        }
    }

    /// Child stream keyed by integers (step, document index, ...).
    pub fn derive_n(&self, parts: &[u64]) -> RngStream {
        let label = parts
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(".");
        self.derive(label)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless uniform draw in `[0, 1)` for element `index` under `key`.
pub fn counter_uniform(key: u64, index: u64) -> f64 {
    let bits = splitmix64(key ^ splitmix64(index));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}
