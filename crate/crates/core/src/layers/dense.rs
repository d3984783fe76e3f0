use serde::{Deserialize, Serialize};

use super::{Activation, FragmentKind, LogitNoise};
use crate::error::{ensure, Result};
use crate::numerics::{matvec, Tensor};

/// Fully connected layer `phi(W x + b + sigma * eps)`. The input may have any
/// shape with `d_in` entries; it is read in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `d_out x d_in`
    pub weight: Tensor,
    pub bias: Tensor,
    #[serde(default)]
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        ensure!(weight.rank() == 2, "dense weight must be a matrix");
        ensure!(
            bias.shape() == [weight.shape()[0]],
            "dense bias shape {:?} does not match weight rows {}",
            bias.shape(),
            weight.shape()[0]
        );
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Pre-activation `W x + b`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.d_out()];
        matvec(self.weight.data(), x, self.d_out(), self.d_in(), &mut v);
        for (o, b) in v.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        v
    }

    pub fn forward(
        &self,
        x: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        ensure!(
            x.len() == self.d_in(),
            "dense layer expects {} inputs, got shape {:?}",
            self.d_in(),
            x.shape()
        );
        let mut v = self.logits(x.data());
        let fragment = match noise {
            None => None,
            Some(mut n) => {
                let eps = n.draw(v.len())?;
                for (o, e) in v.iter_mut().zip(&eps) {
                    *o += n.sigma * e;
                }
                Some(FragmentKind::Dense {
                    input: x.clone().reshape(&[x.len()])?,
                    eps: Tensor::from_vec(vec![eps.len()], eps)?,
                })
            }
        };
        let act = self.activation;
        v.iter_mut().for_each(|o| *o = act.apply(*o));
        Ok((Tensor::from_vec(vec![v.len()], v)?, fragment))
    }
}
