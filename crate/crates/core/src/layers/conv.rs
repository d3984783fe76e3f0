use serde::{Deserialize, Serialize};

use super::{Activation, FragmentKind, LogitNoise};
use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// 2-D convolution (cross-correlation) with valid padding and stride 1.
///
/// Input `c_in x h_in x w_in`, weight `c_out x c_in x h_k x w_k`, output
/// `c_out x (h_in - h_k + 1) x (w_in - w_k + 1)`. Logit noise is one draw per
/// output element, shared scale `sigma` across channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    #[serde(default)]
    pub activation: Activation,
}

/// Output extents of a valid stride-1 correlation.
pub(crate) fn valid_extent(input: usize, kernel: usize) -> usize {
    input + 1 - kernel
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        ensure!(weight.rank() == 4, "conv weight must be c_out x c_in x h x w");
        ensure!(
            bias.shape() == [weight.shape()[0]],
            "conv bias must have c_out entries"
        );
        Ok(Conv2d {
            weight,
            bias,
            activation,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Checks the input geometry and returns `(h_in, w_in, h_out, w_out)`.
    pub fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            x.rank() == 3 && x.shape()[0] == self.c_in(),
            "conv expects a {} x h x w input, got {:?}",
            self.c_in(),
            x.shape()
        );
        let (kh, kw) = self.kernel();
        let (h, w) = (x.shape()[1], x.shape()[2]);
        ensure!(
            kh <= h && kw <= w,
            "kernel {kh}x{kw} larger than input {h}x{w}"
        );
        Ok((h, w, valid_extent(h, kh), valid_extent(w, kw)))
    }

    /// Pre-activation `x * theta + b`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w, ho, wo) = self.geometry(x)?;
        let (kh, kw) = self.kernel();
        let (co, ci) = (self.c_out(), self.c_in());
        let xd = x.data();
        let wd = self.weight.data();
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = self.bias.data()[o]);
            for i in 0..ci {
                let xin = &xd[i * h * w..(i + 1) * h * w];
                for s in 0..kh {
                    for t in 0..kw {
                        let k = wd[((o * ci + i) * kh + s) * kw + t];
                        if k == 0.0 {
                            continue;
                        }
                        for j in 0..ho {
                            let xrow = &xin[(j + s) * w + t..(j + s) * w + t + wo];
                            let orow = &mut plane[j * wo..(j + 1) * wo];
                            for (ov, xv) in orow.iter_mut().zip(xrow) {
                                *ov += k * xv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(vec![co, ho, wo], out)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        let mut v = self.logits(x)?;
        let fragment = match noise {
            None => None,
            Some(mut n) => {
                let eps = n.draw(v.len())?;
                for (o, e) in v.data_mut().iter_mut().zip(&eps) {
                    *o += n.sigma * e;
                }
                Some(FragmentKind::Conv {
                    input: x.clone(),
                    eps: Tensor::from_vec(v.shape().to_vec(), eps)?,
                })
            }
        };
        let act = self.activation;
        v.data_mut().iter_mut().for_each(|o| *o = act.apply(*o));
        Ok((v, fragment))
    }
}

/// Valid cross-correlation of one `h x w` plane with one `ho x wo` field,
/// giving the `(h - ho + 1) x (w - wo + 1)` kernel-shaped result.
pub(crate) fn correlate_plane(
    x: &[f64],
    h: usize,
    w: usize,
    field: &[f64],
    ho: usize,
    wo: usize,
    out: &mut [f64],
    scale: f64,
) {
    let kh = h + 1 - ho;
    let kw = w + 1 - wo;
    for s in 0..kh {
        for t in 0..kw {
            let mut acc = 0.0;
            for j in 0..ho {
                let xrow = &x[(j + s) * w + t..(j + s) * w + t + wo];
                let frow = &field[j * wo..(j + 1) * wo];
                acc += xrow.iter().zip(frow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[s * kw + t] += scale * acc;
        }
    }
}
