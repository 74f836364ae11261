//! Keyed random streams.
//!
//! A stream is identified by `(master_seed, purpose, replicate, axis)`. The
//! three integer coordinates are folded through the SplitMix64 finalizer into
//! a 256-bit ChaCha8 key; the purpose tag becomes the ChaCha stream id. Two
//! streams that differ only in purpose share a key but use disjoint stream
//! ids, so their draws never overlap. Every replicate owns its streams and
//! needs no coordination with other workers.
//!
//! Gaussians are produced by the ziggurat sampler of `rand_distr`, which is a
//! fixed deterministic transform of the underlying 64-bit words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Purpose {
    Weights = 1,
    Batch = 2,
    Probe = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub purpose: Purpose,
    pub replicate: u64,
    pub axis: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, purpose: Purpose, replicate: u64, axis: u64) -> Self {
        StreamKey {
            master_seed,
            purpose,
            replicate,
            axis,
        }
    }

    pub fn stream(&self) -> Stream {
        let mut state = mix64(self.master_seed);
        state = mix64(state ^ mix64(self.replicate.wrapping_add(0x243F_6A88_85A3_08D3)));
        state = mix64(state ^ mix64(self.axis.wrapping_add(0x1319_8A2E_0370_7344)));
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = state.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix64(state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.purpose as u64);
        rng
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
