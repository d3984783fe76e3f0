use serde::{Deserialize, Serialize};

use super::{FragmentKind, LogitNoise};
use crate::error::{ensure, Result};
use crate::numerics::{matvec, Tensor};

pub const DEFAULT_LEAK: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 1.0;
pub const DEFAULT_STEPS: usize = 8;

fn default_leak() -> f64 {
    DEFAULT_LEAK
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

/// Layer of leaky integrate-and-fire neurons.
///
/// `u_t = k u_{t-1} (1 - s_{t-1}) + W x_t + sigma eps_t` and `s_t = [u_t >= V_th]`,
/// with `u_0 = 0`, `s_0 = 0`. Input and output are `T x d` spike trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lif {
    /// `d_out x d_in`
    pub weight: Tensor,
    #[serde(default = "default_leak")]
    pub leak: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

/// Membrane potentials and spikes of one run, each `T x d_out`.
#[derive(Debug, Clone)]
pub struct LifRun {
    pub potential: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl Lif {
    pub fn new(weight: Tensor, leak: f64, threshold: f64) -> Result<Self> {
        ensure!(weight.rank() == 2, "lif weight must be a matrix");
        ensure!(leak > 0.0 && leak < 1.0, "leak must lie in (0, 1), got {leak}");
        ensure!(threshold > 0.0, "threshold must be positive, got {threshold}");
        Ok(Lif {
            weight,
            leak,
            threshold,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn run(&self, x: &Tensor, eps: Option<(&[f64], f64)>) -> Result<LifRun> {
        ensure!(
            x.rank() == 2 && x.shape()[1] == self.d_in(),
            "lif expects a T x {} spike train, got {:?}",
            self.d_in(),
            x.shape()
        );
        ensure!(
            x.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "lif input must be binary"
        );
        ensure!(self.leak > 0.0 && self.leak < 1.0, "leak must lie in (0, 1)");
        ensure!(self.threshold > 0.0, "threshold must be positive");
        let (steps, d) = (x.shape()[0], self.d_out());
        let mut potential = vec![0.0; steps * d];
        let mut spikes = vec![0.0; steps * d];
        let mut drive = vec![0.0; d];
        for t in 0..steps {
            matvec(self.weight.data(), x.row(t), d, self.d_in(), &mut drive);
            for k in 0..d {
                let carry = if t == 0 {
                    0.0
                } else {
                    self.leak * potential[(t - 1) * d + k] * (1.0 - spikes[(t - 1) * d + k])
                };
                let mut u = carry + drive[k];
                if let Some((e, sigma)) = eps {
                    u += sigma * e[t * d + k];
                }
                potential[t * d + k] = u;
                spikes[t * d + k] = if u >= self.threshold { 1.0 } else { 0.0 };
            }
        }
        Ok(LifRun { potential, spikes })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        ensure!(x.rank() == 2, "lif expects a T x d_in spike train");
        let (steps, d) = (x.shape()[0], self.d_out());
        let (run, fragment) = match noise {
            None => (self.run(x, None)?, None),
            Some(mut n) => {
                let eps = n.draw(steps * d)?;
                let run = self.run(x, Some((&eps, n.sigma)))?;
                let frag = FragmentKind::Lif {
                    input: x.clone(),
                    eps: Tensor::from_vec(vec![steps, d], eps)?,
                };
                (run, Some(frag))
            }
        };
        Ok((Tensor::from_vec(vec![steps, d], run.spikes)?, fragment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_input_never_spikes() {
        let l = Lif::new(Tensor::filled(&[3, 2], 5.0), 0.5, 1.0).unwrap();
        let (s, _) = l.forward(&Tensor::zeros(&[6, 2]), None).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_reference() {
        let l = Lif::new(Tensor::matrix(&[&[0.6]]), 0.5, 1.0).unwrap();
        let run = l.run(&Tensor::filled(&[4, 1], 1.0), None).unwrap();
        let want = [0.6, 0.9, 1.05, 0.6];
        for (u, w) in run.potential.iter().zip(want) {
            assert!((u - w).abs() < 1e-12, "{u} vs {w}");
        }
        assert_eq!(run.spikes, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn threshold_tie_spikes() {
        let l = Lif::new(Tensor::matrix(&[&[1.0]]), 0.5, 1.0).unwrap();
        let run = l.run(&Tensor::filled(&[1, 1], 1.0), None).unwrap();
        assert_eq!(run.spikes, vec![1.0]);
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let l = Lif::new(Tensor::matrix(&[&[1.0]]), 0.5, 1.0).unwrap();
        assert!(l.forward(&Tensor::filled(&[2, 1], 0.5), None).is_err());
    }

    #[test]
    fn bad_leak_is_rejected() {
        assert!(Lif::new(Tensor::matrix(&[&[1.0]]), 1.0, 1.0).is_err());
        assert!(Lif::new(Tensor::matrix(&[&[1.0]]), 0.5, 0.0).is_err());
    }
}
