use std::sync::Arc;

use super::*;
use crate::layers::{Activation, Dense, GraphData, Layer, LayerSpec, RnnKind};
use crate::numerics::ZeroNoise;

fn mlp(seed: u64) -> Network {
    Network::from_specs(
        &[
            LayerSpec::Dense {
                d_in: 2,
                d_out: 3,
                activation: Activation::Tanh,
                init_scale: 1.0,
            },
            LayerSpec::Dense {
                d_in: 3,
                d_out: 2,
                activation: Activation::Identity,
                init_scale: 1.0,
            },
        ],
        2,
        seed,
    )
    .unwrap()
}

fn batch() -> Vec<Sample> {
    vec![
        Sample::class(Tensor::vector(&[0.3, -0.8]), 0),
        Sample::class(Tensor::vector(&[1.1, 0.4]), 1),
    ]
}

#[test]
fn linear_adjoint_matches_hand_calculus() {
    // L = (theta x - y)^2 / 2 with theta = 1, x = 2, y = 0: dL/dv = 2, dL/dtheta = 4.
    let layer = Layer::Dense(
        Dense::new(Tensor::matrix(&[&[1.0]]), Tensor::zeros(&[1]), Activation::Identity).unwrap(),
    );
    let x = Tensor::vector(&[2.0]);
    let y = layer.forward_clean(&x, None).unwrap();
    let (gx, gp) = layer_backward(&layer, &x, &y, &Tensor::vector(&[2.0]), None).unwrap();
    assert_eq!(gp[0].data(), &[4.0]);
    assert_eq!(gp[1].data(), &[2.0]);
    assert_eq!(gx.data(), &[2.0]);
}

#[test]
fn first_layer_gradient_vanishes_behind_a_constant_head() {
    let mut net = mlp(1);
    if let Layer::Dense(d) = &mut net.layers[1] {
        d.weight = Tensor::zeros(d.weight.shape());
    }
    let g = bp_grad(&net, &batch()).unwrap();
    assert!(g.layer_flat(0).iter().all(|&v| v == 0.0));
}

#[test]
fn bp_agrees_with_finite_differences_on_mlp() {
    for seed in 0..10 {
        let net = mlp(seed);
        let bp = bp_grad(&net, &batch()).unwrap();
        let fd = fd_grad(&net, &batch(), FD_STEP, None).unwrap();
        let fd_flat: Vec<f64> = fd.iter().flat_map(|g| flatten(g)).collect();
        let s = cosine_similarity(&bp.flat(), &fd_flat).unwrap();
        assert!(s.value >= 0.999 && !s.degenerate, "seed {seed}: {s:?}");
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let net = mlp(4);
    let b = batch();
    let bp = bp_grad(&net, &b).unwrap();
    for (s, gx) in b.iter().zip(&bp.input_grads) {
        for k in 0..s.input.len() {
            let fd = central_difference(
                |v| {
                    let mut moved = s.clone();
                    moved.input.data_mut()[k] = v;
                    net.loss(&net.logits(&moved)?, &moved)
                },
                s.input.data()[k],
                1e-6,
            )
            .unwrap();
            assert!((fd - gx.data()[k]).abs() < 1e-7);
        }
    }
}

#[test]
fn central_difference_is_exact_on_quadratics() {
    let f = |x: f64| Ok(3.0 * x * x - 2.0 * x + 1.0);
    for step in [1e-3, 0.5, 7.0] {
        let d = central_difference(f, 0.25, step).unwrap();
        assert!((d - (6.0 * 0.25 - 2.0)).abs() < 1e-12 * (1.0 + 1.0 / step));
    }
}

#[test]
fn step_refinement_agrees_to_six_digits() {
    let net = mlp(7);
    let a = fd_grad(&net, &batch(), 1e-4, None).unwrap();
    let b = fd_grad(&net, &batch(), 1e-5, None).unwrap();
    for (x, y) in a.iter().flat_map(|g| flatten(g)).zip(b.iter().flat_map(|g| flatten(g))) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-3), "{x} vs {y}");
    }
}

#[test]
fn zero_frozen_noise_matches_the_clean_loss() {
    let net = mlp(2);
    let b = batch();
    let plan = NoisePlan::logit_all(&net, 0.3);
    let recorded = FrozenNoise::record(&net, &b, &plan, &RngStream::new(0, 0)).unwrap();
    let zeros = FrozenNoise {
        draws: recorded
            .draws
            .iter()
            .map(|blocks| blocks.iter().map(|v| vec![0.0; v.len()]).collect())
            .collect(),
        ..recorded
    };
    let clean = fd_grad(&net, &b, FD_STEP, None).unwrap();
    let frozen = fd_grad(&net, &b, FD_STEP, Some(&zeros)).unwrap();
    assert_eq!(clean, frozen);
    let mut zero = ZeroNoise;
    let t = net.forward_from(0, &b[0].input, &b[0], &plan, &mut zero).unwrap();
    assert_eq!(t.loss, net.loss(&net.logits(&b[0]).unwrap(), &b[0]).unwrap());
}

#[test]
fn frozen_noise_is_replayed_identically() {
    let net = mlp(3);
    let b = batch();
    let plan = NoisePlan::weight_all(&net, 0.05);
    let f = FrozenNoise::record(&net, &b, &plan, &RngStream::new(1, 1)).unwrap();
    assert_eq!(f.batch_loss(&net, &b).unwrap(), f.batch_loss(&net, &b).unwrap());
    assert_ne!(f.batch_loss(&net, &b).unwrap(), clean_batch_loss(&net, &b).unwrap());
    let g = fd_sigma_grad(&net, &b, &f, 0, FD_STEP).unwrap();
    assert!(g.is_finite());
}

#[test]
fn cosine_reference_cases() {
    let a = [1.0, 2.0, -3.0];
    assert!((cosine_similarity(&a, &a).unwrap().value - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((cosine_similarity(&a, &neg).unwrap().value + 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap().value, 0.0);
    let z = cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!(z.degenerate && z.value == 0.0);
    assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn surrogate_window() {
    assert_eq!(spike_surrogate(1.0, 1.0), 1.0);
    assert_eq!(spike_surrogate(1.49, 1.0), 1.0);
    assert_eq!(spike_surrogate(1.5, 1.0), 0.0);
    assert_eq!(spike_surrogate(0.2, 1.0), 0.0);
}

fn check_against_fd(net: &Network, batch: &[Sample]) {
    let bp = bp_grad(net, batch).unwrap();
    let fd = fd_grad(net, batch, FD_STEP, None).unwrap();
    for l in 0..net.layers.len() {
        if !net.layers[l].has_params() {
            continue;
        }
        let s = cosine_similarity(&bp.layer_flat(l), &flatten(&fd[l])).unwrap();
        assert!(s.value >= 0.999, "layer {l} ({}): {s:?}", net.layers[l].name());
    }
}

#[test]
fn recurrent_adjoints_match_finite_differences() {
    for kind in [RnnKind::Vanilla, RnnKind::Gru, RnnKind::Lstm] {
        let net = Network::from_specs(
            &[
                LayerSpec::Rnn {
                    kind,
                    d_x: 2,
                    d_h: 3,
                    init_scale: 1.5,
                },
                LayerSpec::Dense {
                    d_in: 3,
                    d_out: 2,
                    activation: Activation::Identity,
                    init_scale: 1.0,
                },
            ],
            2,
            5,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![3, 2], vec![0.5, -1.0, 0.2, 0.8, -0.3, 0.1]).unwrap();
        check_against_fd(&net, &[Sample::class(x, 1)]);
    }
}

#[test]
fn conv_adjoint_matches_finite_differences() {
    let net = Network::from_specs(
        &[
            LayerSpec::Conv2d {
                c_in: 2,
                c_out: 3,
                kernel: 2,
                activation: Activation::Tanh,
                init_scale: 1.0,
            },
            LayerSpec::Dense {
                d_in: 12,
                d_out: 3,
                activation: Activation::Identity,
                init_scale: 1.0,
            },
        ],
        3,
        8,
    )
    .unwrap();
    let x = Tensor::from_vec(vec![2, 3, 3], (0..18).map(|v| (v as f64 * 0.61).sin()).collect()).unwrap();
    check_against_fd(&net, &[Sample::class(x, 2)]);
}

#[test]
fn graph_adjoints_match_finite_differences() {
    let feats: Vec<f64> = (0..15).map(|v| (v as f64 * 0.43).cos()).collect();
    let graph = Arc::new(
        GraphData::new(
            Tensor::from_vec(vec![5, 3], feats).unwrap(),
            [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)],
            vec![0, 1, 0, 1, 1],
            2,
            vec![0, 1, 2],
            vec![3, 4],
        )
        .unwrap(),
    );
    for literal in [false, true] {
        let net = Network::from_specs(
            &[
                LayerSpec::Gcn {
                    d_in: 3,
                    d_out: 4,
                    activation: Activation::Tanh,
                    init_scale: 1.0,
                },
                LayerSpec::Gat {
                    d_in: 4,
                    d_out: 2,
                    activation: Activation::Identity,
                    literal_self_aggregation: literal,
                    init_scale: 2.0,
                },
            ],
            2,
            6,
        )
        .unwrap();
        check_against_fd(&net, &[Sample::nodes(graph.clone(), vec![0, 1, 2])]);
    }
}

#[test]
fn spiking_gradient_follows_the_surrogate_chain() {
    // One neuron, one step: the only path is s = H(w x) with x = 1, so the
    // weight gradient is dL/ds times the surrogate at u = w.
    let net = Network::new(
        vec![
            Layer::Lif(crate::layers::Lif::new(Tensor::matrix(&[&[0.8]]), 0.5, 1.0).unwrap()),
            Layer::Dense(Dense::new(Tensor::matrix(&[&[1.0], &[-1.0]]), Tensor::zeros(&[2]), Activation::Identity).unwrap()),
        ],
        2,
    )
    .unwrap();
    let s = Sample::class(Tensor::matrix(&[&[1.0]]), 0);
    let g = bp_grad(&net, &[s]).unwrap();
    // s = 0: p = (0.5, 0.5), dL/ds = (p0 - 1) * 1 + p1 * (-1) = -1.
    assert_eq!(g.grads[0][0].data(), &[-1.0]);
}
