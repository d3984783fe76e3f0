use serde::{Deserialize, Serialize};

use super::{sigmoid, FragmentKind, LogitNoise};
use crate::error::{ensure, Result};
use crate::numerics::{matvec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnKind {
    Vanilla,
    Gru,
    Lstm,
}

impl RnnKind {
    /// Number of `d_h`-sized blocks produced by each linear map.
    pub fn gates(self) -> usize {
        match self {
            RnnKind::Vanilla => 1,
            RnnKind::Gru => 3,
            RnnKind::Lstm => 4,
        }
    }
}

/// Recurrent cell driven by two noisy linear maps per step:
/// `u_t = W_hh h_{t-1} + b_hh + z_hh`, `v_t = W_xh x_t + b_xh + z_xh`.
///
/// Vanilla: `h_t = tanh(u_t + v_t)`. GRU gate blocks are ordered (r, z, n)
/// with `n = tanh(v_n + r * u_n)`; LSTM blocks are (i, f, g, o) acting on
/// `u_t + v_t`. The layer's network output is the final hidden state `h_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCell {
    pub kind: RnnKind,
    /// `G d_h x d_h`
    pub w_hh: Tensor,
    /// `G d_h x d_x`
    pub w_xh: Tensor,
    pub b_hh: Tensor,
    pub b_xh: Tensor,
}

/// Full state history of one sequence. `h[0]` and `c[0]` are the zero initial
/// states; `u[t]`, `v[t]` are the (noisy) linear maps feeding step `t + 1`.
#[derive(Debug, Clone)]
pub struct RnnRun {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl RnnCell {
    pub fn new(kind: RnnKind, w_hh: Tensor, w_xh: Tensor, b_hh: Tensor, b_xh: Tensor) -> Result<Self> {
        let cell = RnnCell {
            kind,
            w_hh,
            w_xh,
            b_hh,
            b_xh,
        };
        let g = kind.gates();
        let dh = cell.d_h();
        ensure!(
            cell.w_hh.shape() == [g * dh, dh],
            "w_hh must be {} x {dh}",
            g * dh
        );
        ensure!(
            cell.w_xh.rank() == 2 && cell.w_xh.shape()[0] == g * dh,
            "w_xh must have {} rows",
            g * dh
        );
        ensure!(
            cell.b_hh.shape() == [g * dh] && cell.b_xh.shape() == [g * dh],
            "rnn biases must have {} entries",
            g * dh
        );
        Ok(cell)
    }

    pub fn d_h(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn d_x(&self) -> usize {
        self.w_xh.shape()[1]
    }

    fn rows(&self) -> usize {
        self.kind.gates() * self.d_h()
    }

    /// Runs the whole sequence. `eps_hh`/`eps_xh` are `T x G d_h` draws scaled
    /// by `sigma`.
    pub fn run(&self, x: &Tensor, noise: Option<(&[f64], &[f64], f64)>) -> Result<RnnRun> {
        ensure!(
            x.rank() == 2 && x.shape()[1] == self.d_x(),
            "rnn expects a T x {} input, got {:?}",
            self.d_x(),
            x.shape()
        );
        let steps = x.shape()[0];
        let (dh, rows, dx) = (self.d_h(), self.rows(), self.d_x());
        let mut run = RnnRun {
            h: vec![vec![0.0; dh]],
            c: vec![vec![0.0; dh]],
            u: Vec::with_capacity(steps),
            v: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            let mut u = vec![0.0; rows];
            let mut v = vec![0.0; rows];
            matvec(self.w_hh.data(), &run.h[t], rows, dh, &mut u);
            matvec(self.w_xh.data(), x.row(t), rows, dx, &mut v);
            for r in 0..rows {
                u[r] += self.b_hh.data()[r];
                v[r] += self.b_xh.data()[r];
            }
            if let Some((e_hh, e_xh, sigma)) = noise {
                for r in 0..rows {
                    u[r] += sigma * e_hh[t * rows + r];
                    v[r] += sigma * e_xh[t * rows + r];
                }
            }
            let (h, c) = self.step(&u, &v, &run.h[t], &run.c[t]);
            run.h.push(h);
            run.c.push(c);
            run.u.push(u);
            run.v.push(v);
        }
        Ok(run)
    }

    pub(crate) fn step(&self, u: &[f64], v: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dh = self.d_h();
        match self.kind {
            RnnKind::Vanilla => {
                let h = u.iter().zip(v).map(|(a, b)| (a + b).tanh()).collect();
                (h, vec![0.0; dh])
            }
            RnnKind::Gru => {
                let mut h = vec![0.0; dh];
                for k in 0..dh {
                    let r = sigmoid(v[k] + u[k]);
                    let z = sigmoid(v[dh + k] + u[dh + k]);
                    let n = (v[2 * dh + k] + r * u[2 * dh + k]).tanh();
                    h[k] = (1.0 - z) * n + z * h_prev[k];
                }
                (h, vec![0.0; dh])
            }
            RnnKind::Lstm => {
                let mut h = vec![0.0; dh];
                let mut c = vec![0.0; dh];
                for k in 0..dh {
                    let i = sigmoid(u[k] + v[k]);
                    let f = sigmoid(u[dh + k] + v[dh + k]);
                    let g = (u[2 * dh + k] + v[2 * dh + k]).tanh();
                    let o = sigmoid(u[3 * dh + k] + v[3 * dh + k]);
                    c[k] = f * c_prev[k] + i * g;
                    h[k] = o * c[k].tanh();
                }
                (h, c)
            }
        }
    }

    /// Hidden and cell sequences (`T x d_h` each) plus the trace fragment when
    /// logit noise is injected.
    pub fn run_sequence(
        &self,
        x: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Tensor, Option<FragmentKind>)> {
        ensure!(x.rank() == 2, "rnn expects a T x d_x input");
        let steps = x.shape()[0];
        let rows = self.rows();
        let (run, fragment) = match noise {
            None => (self.run(x, None)?, None),
            Some(mut n) => {
                let e_hh = n.draw(steps * rows)?;
                let e_xh = n.draw(steps * rows)?;
                let run = self.run(x, Some((&e_hh, &e_xh, n.sigma)))?;
                let h_prev: Vec<f64> = run.h[..steps].iter().flatten().copied().collect();
                let frag = FragmentKind::Rnn {
                    h_prev: Tensor::from_vec(vec![steps, self.d_h()], h_prev)?,
                    input: x.clone(),
                    eps_hh: Tensor::from_vec(vec![steps, rows], e_hh)?,
                    eps_xh: Tensor::from_vec(vec![steps, rows], e_xh)?,
                };
                (run, Some(frag))
            }
        };
        let dh = self.d_h();
        let h = Tensor::from_vec(vec![steps, dh], run.h[1..].concat())?;
        let c = Tensor::from_vec(vec![steps, dh], run.c[1..].concat())?;
        Ok((h, c, fragment))
    }

    pub fn forward(
        &self,
        x: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        let (h, _, frag) = self.run_sequence(x, noise)?;
        let last = h.shape()[0] - 1;
        Ok((Tensor::vector(h.row(last)), frag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn vanilla(w_hh: f64, w_xh: f64) -> RnnCell {
        RnnCell::new(
            RnnKind::Vanilla,
            Tensor::matrix(&[&[w_hh]]),
            Tensor::matrix(&[&[w_xh]]),
            Tensor::zeros(&[1]),
            Tensor::zeros(&[1]),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let cell = vanilla(0.0, 0.0);
        let x = Tensor::from_vec(vec![4, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let (h, _, _) = cell.run_sequence(&x, None).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_scalar_reference() {
        let cell = vanilla(0.0, 1.0);
        let (h, _) = cell.forward(&Tensor::matrix(&[&[0.5]]), None).unwrap();
        assert!((h.data()[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((h.data()[0] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn noise_differs_across_steps() {
        let cell = vanilla(0.5, 1.0);
        let x = Tensor::from_vec(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let mut s = RngStream::new(9, 1);
        let n = LogitNoise {
            sigma: 0.1,
            attn_sigma: 0.1,
            source: &mut s,
        };
        let (_, _, frag) = cell.run_sequence(&x, Some(n)).unwrap();
        let Some(FragmentKind::Rnn { eps_hh, eps_xh, .. }) = frag else {
            panic!("missing rnn fragment");
        };
        let e = eps_hh.data();
        assert!(e[0] != e[1] && e[1] != e[2]);
        assert_ne!(eps_hh, eps_xh);
    }

    #[test]
    fn lstm_and_gru_states_are_bounded() {
        let mut s = RngStream::new(2, 2);
        for kind in [RnnKind::Gru, RnnKind::Lstm] {
            let g = kind.gates();
            let rand = |s: &mut RngStream, r: usize, c: usize| {
                let v: Vec<f64> = (0..r * c).map(|_| s.next_gaussian()).collect();
                Tensor::from_vec(vec![r, c], v).unwrap()
            };
            let cell = RnnCell::new(
                kind,
                rand(&mut s, 2 * g, 2),
                rand(&mut s, 2 * g, 3),
                Tensor::zeros(&[2 * g]),
                Tensor::zeros(&[2 * g]),
            )
            .unwrap();
            let x = rand(&mut s, 5, 3);
            let (h, _, _) = cell.run_sequence(&x, None).unwrap();
            assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
