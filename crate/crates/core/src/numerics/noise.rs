//! Gaussian noise blocks and the sources that feed them into noisy forwards.

use super::rng::RngStream;
use super::sobol::gaussian_point;
use super::tensor::Tensor;
use crate::error::Result;

/// A block of standard-normal draws. `antithetic_of` points at the index of
/// the block this one negates.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    pub values: Tensor,
    pub antithetic_of: Option<usize>,
}

impl NoiseBlock {
    pub fn new(values: Tensor) -> Self {
        NoiseBlock {
            values,
            antithetic_of: None,
        }
    }
}

/// Appends the negated twin of every block: output `n + i` is `-blocks[i]`.
pub fn antithetic_expand(blocks: Vec<NoiseBlock>) -> Vec<NoiseBlock> {
    debug_assert!(blocks.iter().all(|b| b.antithetic_of.is_none()));
    let n = blocks.len();
    let mut out = blocks;
    for i in 0..n {
        let twin = NoiseBlock {
            values: out[i].values.map(|v| -v),
            antithetic_of: Some(i),
        };
        out.push(twin);
    }
    out
}

/// Supplier of standard-normal vectors to noisy layer forwards. Each call
/// corresponds to one perturbed object (a logit field or a parameter tensor).
pub trait NoiseSource {
    fn gaussian(&mut self, n: usize) -> Result<Vec<f64>>;
}

impl NoiseSource for RngStream {
    fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; n];
        self.fill_gaussian(&mut v);
        Ok(v)
    }
}

/// Always returns zeros; forces a perturbed layer onto its noise-free path.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; n])
    }
}

/// Pseudo-random draws that are also recorded, so the same copy can be
/// replayed (for batch-shared weight noise) or negated (for antithetic twins).
pub struct Recording<'a, S: NoiseSource + ?Sized> {
    inner: &'a mut S,
    pub blocks: Vec<Vec<f64>>,
}

impl<'a, S: NoiseSource + ?Sized> Recording<'a, S> {
    pub fn new(inner: &'a mut S) -> Self {
        Recording {
            inner,
            blocks: Vec::new(),
        }
    }
}

impl<S: NoiseSource + ?Sized> NoiseSource for Recording<'_, S> {
    fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        let v = self.inner.gaussian(n)?;
        self.blocks.push(v.clone());
        Ok(v)
    }
}

/// Replays recorded blocks in order, optionally negated.
pub struct Replay<'a> {
    blocks: &'a [Vec<f64>],
    next: usize,
    negate: bool,
}

impl<'a> Replay<'a> {
    pub fn new(blocks: &'a [Vec<f64>], negate: bool) -> Self {
        Replay {
            blocks,
            next: 0,
            negate,
        }
    }
}

impl NoiseSource for Replay<'_> {
    fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        let block = self.blocks.get(self.next).ok_or_else(|| {
            crate::error::Error::contract("replay ran past the recorded noise blocks")
        })?;
        crate::error::ensure!(
            block.len() == n,
            "replayed block has {} values, forward asked for {n}",
            block.len()
        );
        self.next += 1;
        Ok(if self.negate {
            block.iter().map(|v| -v).collect()
        } else {
            block.clone()
        })
    }
}

/// Quasi-random Gaussian noise: successive requests within one copy occupy
/// consecutive Sobol dimensions of the same point.
pub struct QmcNoise {
    index: u64,
    key: u64,
    offset: usize,
}

impl QmcNoise {
    /// `index` is the Sobol point index (>= 1); `key` selects the digital shift.
    pub fn new(index: u64, key: u64) -> Self {
        Self::starting_at(index, key, 0)
    }

    /// Like `new`, with the first request placed at dimension `first_dim`.
    pub fn starting_at(index: u64, key: u64, first_dim: usize) -> Self {
        QmcNoise {
            index,
            key,
            offset: first_dim,
        }
    }
}

impl NoiseSource for QmcNoise {
    fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0.0; n];
        gaussian_point(self.index, self.key, self.offset, &mut buf)?;
        self.offset += n;
        Ok(buf)
    }
}
