//! Hand-written adjoints, one per layer type.

use crate::error::{ensure, Result};
use crate::layers::{
    sigmoid, Activation, Conv2d, Dense, Gat, Gcn, GraphData, Layer, Lif, RnnCell, RnnKind,
    ATTENTION_SLOPE,
};
use crate::numerics::{matmul_tn, matvec_t, outer_acc, Tensor};

/// Half-width of the rectangular window used as the spike derivative.
pub const SURROGATE_WIDTH: f64 = 0.5;

/// `d s / d u` of the Heaviside spike, replaced by `1/(2a)` inside
/// `|u - V_th| < a`.
pub fn spike_surrogate(u: f64, threshold: f64) -> f64 {
    if (u - threshold).abs() < SURROGATE_WIDTH {
        0.5 / SURROGATE_WIDTH
    } else {
        0.0
    }
}

fn through_activation(act: Activation, out: &[f64], grad_out: &[f64]) -> Vec<f64> {
    out.iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * act.derivative_from_output(y))
        .collect()
}

/// Backward of one layer: given its input, its clean output and `dL/doutput`,
/// returns `dL/dinput` (shaped like the input) and the parameter gradients in
/// `Layer::params` order.
pub fn layer_backward(
    layer: &Layer,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    graph: Option<&GraphData>,
) -> Result<(Tensor, Vec<Tensor>)> {
    ensure!(
        output.shape() == grad_out.shape(),
        "output gradient shape {:?} does not match output {:?}",
        grad_out.shape(),
        output.shape()
    );
    let need_graph =
        || graph.ok_or_else(|| crate::Error::contract("graph layer evaluated without a graph"));
    match layer {
        Layer::Dense(l) => dense(l, input, output, grad_out),
        Layer::Conv2d(l) => conv(l, input, output, grad_out),
        Layer::Rnn(l) => rnn(l, input, grad_out),
        Layer::Gcn(l) => gcn(l, need_graph()?, input, output, grad_out),
        Layer::Gat(l) => gat(l, need_graph()?, input, output, grad_out),
        Layer::Lif(l) => lif(l, input, grad_out),
        // Straight-through: each pixel receives the summed gradient of its spikes.
        Layer::SpikeEncoder(_) => {
            let n = input.len();
            let mut g = vec![0.0; n];
            for row in grad_out.data().chunks(n) {
                g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            Ok((Tensor::from_vec(input.shape().to_vec(), g)?, Vec::new()))
        }
        Layer::LastStep(_) => {
            let mut g = Tensor::zeros(input.shape());
            let last = input.shape()[0] - 1;
            g.row_mut(last).copy_from_slice(grad_out.data());
            Ok((g, Vec::new()))
        }
        // Tokens are discrete; there is no input gradient.
        Layer::OneHot(_) => Ok((Tensor::zeros(input.shape()), Vec::new())),
    }
}

fn dense(l: &Dense, x: &Tensor, y: &Tensor, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let gv = through_activation(l.activation, y.data(), gy.data());
    let mut gw = Tensor::zeros(l.weight.shape());
    outer_acc(gw.data_mut(), 1.0, &gv, x.data());
    let mut gx = vec![0.0; l.d_in()];
    matvec_t(l.weight.data(), &gv, l.d_out(), l.d_in(), &mut gx);
    Ok((
        Tensor::from_vec(x.shape().to_vec(), gx)?,
        vec![gw, Tensor::vector(&gv)],
    ))
}

fn conv(l: &Conv2d, x: &Tensor, y: &Tensor, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (h, w, ho, wo) = l.geometry(x)?;
    let (kh, kw) = l.kernel();
    let (co, ci) = (l.c_out(), l.c_in());
    let gv = through_activation(l.activation, y.data(), gy.data());
    let mut gw = Tensor::zeros(l.weight.shape());
    let mut gb = vec![0.0; co];
    let mut gx = vec![0.0; x.len()];
    let wd = l.weight.data();
    for o in 0..co {
        let field = &gv[o * ho * wo..(o + 1) * ho * wo];
        gb[o] = field.iter().sum();
        for i in 0..ci {
            let plane = &x.data()[i * h * w..(i + 1) * h * w];
            let k0 = (o * ci + i) * kh * kw;
            crate::layers::correlate_plane(
                plane,
                h,
                w,
                field,
                ho,
                wo,
                &mut gw.data_mut()[k0..k0 + kh * kw],
                1.0,
            );
            let gplane = &mut gx[i * h * w..(i + 1) * h * w];
            for s in 0..kh {
                for t in 0..kw {
                    let k = wd[k0 + s * kw + t];
                    for j in 0..ho {
                        for c in 0..wo {
                            gplane[(j + s) * w + c + t] += k * field[j * wo + c];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), gx)?,
        vec![gw, Tensor::vector(&gb)],
    ))
}

/// Backpropagation through time. The layer output is `h_T`.
fn rnn(l: &RnnCell, x: &Tensor, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let run = l.run(x, None)?;
    let steps = x.shape()[0];
    let (dh, dx) = (l.d_h(), l.d_x());
    let rows = l.kind.gates() * dh;
    let mut g_whh = Tensor::zeros(l.w_hh.shape());
    let mut g_wxh = Tensor::zeros(l.w_xh.shape());
    let mut g_bhh = vec![0.0; rows];
    let mut g_bxh = vec![0.0; rows];
    let mut gx = Tensor::zeros(x.shape());
    let mut gh = gy.data().to_vec();
    let mut gc = vec![0.0; dh];
    let mut gh_prev = vec![0.0; dh];
    for t in (0..steps).rev() {
        let (u, v) = (&run.u[t], &run.v[t]);
        let (h_prev, c_prev) = (&run.h[t], &run.c[t]);
        let mut gu = vec![0.0; rows];
        let mut gv = vec![0.0; rows];
        let mut direct = vec![0.0; dh];
        match l.kind {
            RnnKind::Vanilla => {
                for k in 0..dh {
                    let h = run.h[t + 1][k];
                    let ga = gh[k] * (1.0 - h * h);
                    gu[k] = ga;
                    gv[k] = ga;
                }
            }
            RnnKind::Gru => {
                for k in 0..dh {
                    let r = sigmoid(v[k] + u[k]);
                    let z = sigmoid(v[dh + k] + u[dh + k]);
                    let n = (v[2 * dh + k] + r * u[2 * dh + k]).tanh();
                    let g_n = gh[k] * (1.0 - z) * (1.0 - n * n);
                    let g_z = gh[k] * (h_prev[k] - n) * z * (1.0 - z);
                    let g_r = g_n * u[2 * dh + k] * r * (1.0 - r);
                    direct[k] = gh[k] * z;
                    gv[k] = g_r;
                    gu[k] = g_r;
                    gv[dh + k] = g_z;
                    gu[dh + k] = g_z;
                    gv[2 * dh + k] = g_n;
                    gu[2 * dh + k] = g_n * r;
                }
            }
            RnnKind::Lstm => {
                for k in 0..dh {
                    let a = |b: usize| u[b * dh + k] + v[b * dh + k];
                    let (i, f, g, o) = (sigmoid(a(0)), sigmoid(a(1)), a(2).tanh(), sigmoid(a(3)));
                    let tc = run.c[t + 1][k].tanh();
                    let g_c = gc[k] + gh[k] * o * (1.0 - tc * tc);
                    let ga = [
                        g_c * g * i * (1.0 - i),
                        g_c * c_prev[k] * f * (1.0 - f),
                        g_c * i * (1.0 - g * g),
                        gh[k] * tc * o * (1.0 - o),
                    ];
                    for (b, val) in ga.into_iter().enumerate() {
                        gu[b * dh + k] = val;
                        gv[b * dh + k] = val;
                    }
                    gc[k] = g_c * f;
                }
            }
        }
        outer_acc(g_whh.data_mut(), 1.0, &gu, h_prev);
        outer_acc(g_wxh.data_mut(), 1.0, &gv, x.row(t));
        g_bhh.iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
        g_bxh.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        matvec_t(l.w_xh.data(), &gv, rows, dx, gx.row_mut(t));
        matvec_t(l.w_hh.data(), &gu, rows, dh, &mut gh_prev);
        for k in 0..dh {
            gh[k] = gh_prev[k] + direct[k];
        }
    }
    Ok((
        gx,
        vec![g_whh, g_wxh, Tensor::vector(&g_bhh), Tensor::vector(&g_bxh)],
    ))
}

fn gcn(l: &Gcn, g: &GraphData, h: &Tensor, y: &Tensor, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let n = g.num_nodes();
    let (din, dout) = (l.d_in(), l.d_out());
    let gv = through_activation(l.activation, y.data(), gy.data());
    let xhat = g.aggregate(h)?;
    let gw = matmul_tn(xhat.data(), &gv, n, din, dout);
    // gv W^T, then the (symmetric) aggregation.
    let mut gxhat = vec![0.0; n * din];
    for i in 0..n {
        matvec_t_rows(l.weight.data(), &gv[i * dout..(i + 1) * dout], din, dout, &mut gxhat[i * din..(i + 1) * din]);
    }
    let gh = g.aggregate(&Tensor::from_vec(vec![n, din], gxhat)?)?;
    Ok((gh, vec![Tensor::from_vec(vec![din, dout], gw)?]))
}

/// `out = W g` for `W` of `rows x cols` and `g` of length `cols`.
fn matvec_t_rows(w: &[f64], g: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        out[r] = w[r * cols..(r + 1) * cols].iter().zip(g).map(|(a, b)| a * b).sum();
    }
}

fn gat(l: &Gat, g: &GraphData, h: &Tensor, y: &Tensor, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let it = l.internals(g, h, None, None)?;
    let (n, din, dout) = (g.num_nodes(), l.d_in(), l.d_out());
    let g_agg = through_activation(l.activation, y.data(), gy.data());
    let (a_left, a_right) = l.attn.data().split_at(dout);
    let mut g_v = vec![0.0; n * dout];
    let mut g_alpha = vec![0.0; it.pairs.len()];
    for (e, &(i, j)) in it.pairs.iter().enumerate() {
        let src = if l.literal_self_aggregation { i } else { j };
        let gi = &g_agg[i * dout..(i + 1) * dout];
        g_alpha[e] = gi.iter().zip(&it.v[src * dout..(src + 1) * dout]).map(|(a, b)| a * b).sum();
        for k in 0..dout {
            g_v[src * dout + k] += it.alpha[e] * gi[k];
        }
    }
    let mut g_attn = vec![0.0; 2 * dout];
    let mut start = 0;
    for i in 0..n {
        let span = start..start + g.neighborhood(i).len();
        let mean: f64 = span.clone().map(|e| it.alpha[e] * g_alpha[e]).sum();
        for e in span.clone() {
            let slope = if it.u[e] >= 0.0 { 1.0 } else { ATTENTION_SLOPE };
            let g_u = it.alpha[e] * (g_alpha[e] - mean) * slope;
            let (a, b) = it.pairs[e];
            for k in 0..dout {
                g_attn[k] += g_u * it.v[a * dout + k];
                g_attn[dout + k] += g_u * it.v[b * dout + k];
                g_v[a * dout + k] += g_u * a_left[k];
                g_v[b * dout + k] += g_u * a_right[k];
            }
        }
        start = span.end;
    }
    let g_omega = matmul_tn(h.data(), &g_v, n, din, dout);
    let mut gh = vec![0.0; n * din];
    for i in 0..n {
        matvec_t_rows(l.omega.data(), &g_v[i * dout..(i + 1) * dout], din, dout, &mut gh[i * din..(i + 1) * din]);
    }
    Ok((
        Tensor::from_vec(vec![n, din], gh)?,
        vec![Tensor::from_vec(vec![din, dout], g_omega)?, Tensor::vector(&g_attn)],
    ))
}

/// Surrogate backward through time. The reset factor `(1 - s_{t-1})` is
/// treated as a constant, so gradient flows along the leak path only.
fn lif(l: &Lif, x: &Tensor, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let run = l.run(x, None)?;
    let (steps, d, din) = (x.shape()[0], l.d_out(), l.d_in());
    let mut gw = Tensor::zeros(l.weight.shape());
    let mut gx = Tensor::zeros(x.shape());
    let mut carry = vec![0.0; d];
    for t in (0..steps).rev() {
        let mut gu = vec![0.0; d];
        for k in 0..d {
            let idx = t * d + k;
            gu[k] = gy.data()[idx] * spike_surrogate(run.potential[idx], l.threshold) + carry[k];
            carry[k] = gu[k] * l.leak * (1.0 - run.spikes[idx]);
        }
        outer_acc(gw.data_mut(), 1.0, &gu, x.row(t));
        matvec_t(l.weight.data(), &gu, d, din, gx.row_mut(t));
    }
    Ok((gx, vec![gw]))
}
