use serde::{Deserialize, Serialize};

use super::lif::DEFAULT_STEPS;
use crate::error::{ensure, Result};
use crate::numerics::{mix64, open_unit, Tensor};

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// Rate coding of intensities in `[0, 1]` into a `T x n` spike train.
///
/// Pixel `p` spikes at step `t` iff its value exceeds a fixed threshold
/// `U(seed, t, p)`, so the encoding is deterministic and a pixel of value
/// `x` fires in about `x T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEncoder {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SpikeEncoder {
    pub fn threshold(&self, t: usize, p: usize) -> f64 {
        open_unit(mix64(mix64(self.seed, t as u64), p as u64))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure!(self.steps >= 1, "spike encoder needs at least one step");
        let n = x.len();
        let mut out = vec![0.0; self.steps * n];
        for t in 0..self.steps {
            for (p, &v) in x.data().iter().enumerate() {
                if v > self.threshold(t, p) {
                    out[t * n + p] = 1.0;
                }
            }
        }
        Tensor::from_vec(vec![self.steps, n], out)
    }
}

/// Keeps the last row of a `T x d` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LastStep {}

impl LastStep {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure!(
            x.rank() == 2 && x.shape()[0] >= 1,
            "last_step expects a non-empty T x d sequence, got {:?}",
            x.shape()
        );
        Ok(Tensor::vector(x.row(x.shape()[0] - 1)))
    }
}

/// Maps a sequence of token indices to a `T x vocab` one-hot matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHot {
    pub vocab: usize,
}

impl OneHot {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure!(!x.is_empty(), "cannot encode an empty sequence");
        let mut out = vec![0.0; x.len() * self.vocab];
        for (t, &tok) in x.data().iter().enumerate() {
            ensure!(
                tok >= 0.0 && tok.fract() == 0.0 && (tok as usize) < self.vocab,
                "token {tok} outside vocabulary of size {}",
                self.vocab
            );
            out[t * self.vocab + tok as usize] = 1.0;
        }
        Tensor::from_vec(vec![x.len(), self.vocab], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_extremes() {
        let enc = SpikeEncoder { steps: 16, seed: 3 };
        let s = enc.forward(&Tensor::vector(&[0.0, 1.0])).unwrap();
        for t in 0..16 {
            assert_eq!(s.row(t), &[0.0, 1.0]);
        }
    }

    #[test]
    fn encoder_rate_tracks_intensity() {
        let enc = SpikeEncoder { steps: 4000, seed: 1 };
        let s = enc.forward(&Tensor::vector(&[0.25])).unwrap();
        let rate = s.data().iter().sum::<f64>() / 4000.0;
        assert!((rate - 0.25).abs() < 0.03);
    }

    #[test]
    fn last_step_and_one_hot() {
        let seq = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(LastStep {}.forward(&seq).unwrap().data(), &[3.0, 4.0]);
        let oh = OneHot { vocab: 3 }.forward(&Tensor::vector(&[2.0, 0.0])).unwrap();
        assert_eq!(oh.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(OneHot { vocab: 3 }.forward(&Tensor::vector(&[3.0])).is_err());
    }
}
