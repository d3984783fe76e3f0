//! Reproducible random streams.
//!
//! The pseudo-random engine is ChaCha8 keyed by the 64-bit seed, with the
//! ChaCha stream number carrying `stream_id` and the block counter carrying the
//! draw position. A stream's output is therefore a pure function of
//! `(seed, stream_id, draw_counter)`, streams with different ids never overlap,
//! and the period of each stream is 2^68 bytes.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normal::quantile_unchecked;
use super::sobol::{SobolSequence, SOBOL_MAX_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Pseudo,
    SobolScrambled,
}

/// A splittable random stream. Cloning a stream clones its position.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    source: Source,
    draw_counter: u64,
    engine: Engine,
}

#[derive(Debug, Clone)]
enum Engine {
    Pseudo(ChaCha8Rng),
    // One-dimensional scrambled Sobol sequence; `draw_counter` is the point index.
    Sobol { shift: u32 },
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::with_source(seed, stream_id, Source::Pseudo)
    }

    pub fn with_source(seed: u64, stream_id: u64, source: Source) -> Self {
        let engine = match source {
            Source::Pseudo => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_id);
                Engine::Pseudo(rng)
            }
            Source::SobolScrambled => Engine::Sobol {
                shift: digital_shift(mix64(seed, stream_id), 0),
            },
        };
        RngStream {
            seed,
            stream_id,
            source,
            draw_counter: 0,
            engine,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn draw_counter(&self) -> u64 {
        self.draw_counter
    }

    /// Independent child stream; the child id is a hash of this id and `key`.
    pub fn split(&self, key: u64) -> RngStream {
        RngStream::with_source(self.seed, mix64(self.stream_id, key), self.source)
    }

    /// Child stream keyed by a sequence of indices.
    pub fn derive(&self, keys: &[u64]) -> RngStream {
        let id = keys.iter().fold(self.stream_id, |acc, &k| mix64(acc, k));
        RngStream::with_source(self.seed, id, self.source)
    }

    fn advance(&mut self, n: u64) {
        self.draw_counter = self
            .draw_counter
            .checked_add(n)
            .expect("random stream draw counter overflowed");
    }

    /// Next raw 64-bit word (pseudo source) or 32-bit Sobol word shifted left
    /// by 32 (sobol source).
    fn next_word(&mut self) -> u64 {
        let word = match &mut self.engine {
            Engine::Pseudo(rng) => rng.next_u64(),
            Engine::Sobol { shift } => {
                // Index 0 is the origin of the net; the stream starts at index 1.
                let idx = self.draw_counter + 1;
                let raw = SobolSequence::coordinate_bits(idx, 0);
                u64::from(raw ^ *shift) << 32
            }
        };
        self.advance(1);
        word
    }

    /// One uniform value in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        let w = self.next_word();
        (w >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_stream(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.next_uniform()).collect()
    }

    /// One standard normal draw by inverse-CDF. Exactly one word is consumed.
    pub fn next_gaussian(&mut self) -> f64 {
        let w = self.next_word();
        quantile_unchecked(open_unit(w))
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_gaussian();
        }
    }

    /// Uniform integer in `0..n` by rejection-free multiply-shift.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let w = self.next_word();
        ((u128::from(w) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_word() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_word()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let w = self.next_word().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

/// Maps a 64-bit word to the open interval (0, 1). Words whose top 53 bits are
/// zero map to half an ulp above zero, so the quantile stays finite.
#[inline]
pub(crate) fn open_unit(w: u64) -> f64 {
    let m = w >> 11;
    if m == 0 {
        0.5 / (1u64 << 53) as f64
    } else {
        m as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// SplitMix64-style mixing of two words.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-dimension digital shift derived from a scramble key.
pub(crate) fn digital_shift(key: u64, dim: usize) -> u32 {
    (mix64(key, dim as u64) >> 32) as u32
}

/// Uniform draws from a stream; equivalent to `stream.uniform_stream(count)`.
pub fn uniform_stream(stream: &mut RngStream, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::contract("uniform_stream needs count >= 1"));
    }
    Ok(stream.uniform_stream(count))
}

pub(crate) fn check_sobol_dim(dim: usize) -> Result<()> {
    if dim > SOBOL_MAX_DIM {
        return Err(Error::Capability(format!(
            "Sobol dimension {dim} exceeds the supported bound {SOBOL_MAX_DIM}"
        )));
    }
    Ok(())
}
