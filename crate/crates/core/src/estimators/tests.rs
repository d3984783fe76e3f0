use super::*;
use crate::layers::{Activation, Conv2d, Dense, ForwardTrace, LayerSpec, RnnCell, RnnKind};

/// Builds a hand-made dense trace for the scalar model `v = theta x + sigma eps`.
fn dense_trace(x: f64, eps: f64, sigma: f64, loss: f64) -> ForwardTrace {
    ForwardTrace {
        fragments: vec![TraceFragment {
            layer: 0,
            mode: NoiseMode::Logit,
            sigma,
            attn_sigma: sigma,
            kind: FragmentKind::Dense {
                input: Tensor::vector(&[x]),
                eps: Tensor::vector(&[eps]),
            },
        }],
        loss,
    }
}

fn scalar_traces(n: usize, seed: u64, loss: impl Fn(f64) -> f64, sigma: f64) -> Vec<ForwardTrace> {
    let mut rng = RngStream::new(seed, 0);
    (0..n)
        .map(|_| {
            let e = rng.next_gaussian();
            dense_trace(1.0, e, sigma, loss(e))
        })
        .collect()
}

fn within_3se(est: f64, se: f64, want: f64) -> bool {
    (est - want).abs() <= 3.0 * se
}

#[test]
fn dense_scalar_identity_loss() {
    let (theta, sigma) = (0.7, 0.3);
    let t = scalar_traces(100_000, 1, |e| theta + sigma * e, sigma);
    let g = lr_dense_grad(&t, 0).unwrap();
    assert!(within_3se(g.grads[0].data()[0], g.std_errors[0].data()[0], 1.0));
    assert_eq!(g.copies, 100_000);
}

#[test]
fn dense_scalar_square_loss() {
    let (theta, sigma) = (0.5, 0.2);
    let t = scalar_traces(100_000, 2, |e| (theta + sigma * e).powi(2), sigma);
    let g = lr_dense_grad(&t, 0).unwrap();
    assert!(within_3se(g.grads[0].data()[0], g.std_errors[0].data()[0], 1.0));
}

#[test]
fn sigma_gradient_of_square_loss() {
    let (theta, sigma) = (1.0, 0.5);
    let t = scalar_traces(200_000, 3, |e| (theta + sigma * e).powi(2), sigma);
    let (g, se) = lr_sigma_grad(&t, 0).unwrap();
    assert!(within_3se(g, se, 1.0), "{g} +- {se}");
}

#[test]
fn sigma_gradient_of_constant_loss() {
    let t = scalar_traces(50_000, 4, |_| 2.5, 0.1);
    let (g, se) = lr_sigma_grad(&t, 0).unwrap();
    assert!(within_3se(g, se, 0.0));
}

#[test]
fn sigma_score_is_even() {
    let a = dense_trace(1.0, 0.8, 0.1, 1.0);
    let b = dense_trace(1.0, -0.8, 0.1, 1.0);
    assert_eq!(
        sigma_score(&a.fragments[0]).unwrap(),
        sigma_score(&b.fragments[0]).unwrap()
    );
}

#[test]
fn weight_perturbation_scalar() {
    let (theta, sigma, x) = (0.3, 0.1, 2.0);
    let mut rng = RngStream::new(5, 0);
    let traces: Vec<ForwardTrace> = (0..100_000)
        .map(|_| {
            let e = rng.next_gaussian();
            ForwardTrace {
                fragments: vec![TraceFragment {
                    layer: 0,
                    mode: NoiseMode::Weight,
                    sigma,
                    attn_sigma: sigma,
                    kind: FragmentKind::Weight {
                        eps: vec![Tensor::vector(&[e])],
                    },
                }],
                loss: (theta + sigma * e) * x,
            }
        })
        .collect();
    let g = lr_weight_perturb_grad(&traces, 0).unwrap();
    assert!(within_3se(g.grads[0].data()[0], g.std_errors[0].data()[0], 2.0));
}

#[test]
fn mixed_modes_are_rejected() {
    let mut t = scalar_traces(4, 6, |e| e, 0.1);
    t[2].fragments[0].mode = NoiseMode::Weight;
    assert!(lr_dense_grad(&t, 0).is_err());
    let mut t = scalar_traces(4, 6, |e| e, 0.1);
    t[1].fragments[0].sigma = 0.2;
    assert!(lr_dense_grad(&t, 0).is_err());
    assert!(lr_conv_grad(&scalar_traces(4, 6, |e| e, 0.1), 0).is_err());
}

#[test]
fn degenerate_convolution_matches_dense() {
    let mut rng = RngStream::new(7, 0);
    let mut dense = Vec::new();
    let mut conv = Vec::new();
    for _ in 0..64 {
        let (x, e, l) = (rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian());
        dense.push(dense_trace(x, e, 0.2, l));
        conv.push(ForwardTrace {
            fragments: vec![TraceFragment {
                layer: 0,
                mode: NoiseMode::Logit,
                sigma: 0.2,
                attn_sigma: 0.2,
                kind: FragmentKind::Conv {
                    input: Tensor::from_vec(vec![1, 1, 1], vec![x]).unwrap(),
                    eps: Tensor::from_vec(vec![1, 1, 1], vec![e]).unwrap(),
                },
            }],
            loss: l,
        });
    }
    let a = lr_dense_grad(&dense, 0).unwrap();
    let b = lr_conv_grad(&conv, 0).unwrap();
    assert_eq!(a.flat(), b.flat());
}

fn rnn_trace(steps: usize, rng: &mut RngStream, dyadic: bool) -> ForwardTrace {
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if dyadic {
                    (rng.next_below(17) as f64 - 8.0) / 4.0
                } else {
                    rng.next_gaussian()
                }
            })
            .collect()
    };
    let (dh, dx) = (2, 3);
    let h_prev = Tensor::from_vec(vec![steps, dh], draw(steps * dh)).unwrap();
    let input = Tensor::from_vec(vec![steps, dx], draw(steps * dx)).unwrap();
    let eps_hh = Tensor::from_vec(vec![steps, dh], draw(steps * dh)).unwrap();
    let eps_xh = Tensor::from_vec(vec![steps, dh], draw(steps * dh)).unwrap();
    let loss = draw(1)[0];
    ForwardTrace {
        fragments: vec![TraceFragment {
            layer: 0,
            mode: NoiseMode::Logit,
            sigma: 0.5,
            attn_sigma: 0.5,
            kind: FragmentKind::Rnn {
                h_prev,
                input,
                eps_hh,
                eps_xh,
            },
        }],
        loss,
    }
}

/// The single step `t` of a recurrent trace, as its own trace.
fn step_of(trace: &ForwardTrace, t: usize) -> ForwardTrace {
    let f = &trace.fragments[0];
    let FragmentKind::Rnn {
        h_prev,
        input,
        eps_hh,
        eps_xh,
    } = &f.kind
    else {
        unreachable!()
    };
    let row = |m: &Tensor| Tensor::from_vec(vec![1, m.shape()[1]], m.row(t).to_vec()).unwrap();
    ForwardTrace {
        fragments: vec![TraceFragment {
            kind: FragmentKind::Rnn {
                h_prev: row(h_prev),
                input: row(input),
                eps_hh: row(eps_hh),
                eps_xh: row(eps_xh),
            },
            ..f.clone()
        }],
        loss: trace.loss,
    }
}

#[test]
fn single_step_recurrence_is_dense() {
    let mut rng = RngStream::new(8, 0);
    let traces: Vec<ForwardTrace> = (0..32).map(|_| rnn_trace(1, &mut rng, false)).collect();
    let r = lr_recurrent_grad(&traces, 0).unwrap();
    // W_hh block against a dense layer fed h_0 with the hh draws.
    let dense: Vec<ForwardTrace> = traces
        .iter()
        .map(|t| {
            let FragmentKind::Rnn { h_prev, eps_hh, .. } = &t.fragments[0].kind else {
                unreachable!()
            };
            ForwardTrace {
                fragments: vec![TraceFragment {
                    kind: FragmentKind::Dense {
                        input: Tensor::vector(h_prev.row(0)),
                        eps: Tensor::vector(eps_hh.row(0)),
                    },
                    ..t.fragments[0].clone()
                }],
                loss: t.loss,
            }
        })
        .collect();
    let d = lr_dense_grad(&dense, 0).unwrap();
    assert_eq!(r.grads[0], d.grads[0]);
    assert_eq!(r.grads[2], d.grads[1]);
}

#[test]
fn weight_sharing_identity_is_exact() {
    for dyadic in [true, false] {
        let mut rng = RngStream::new(9, dyadic as u64);
        let copies = if dyadic { 8 } else { 1 };
        let traces: Vec<ForwardTrace> = (0..copies).map(|_| rnn_trace(3, &mut rng, dyadic)).collect();
        let tied = lr_recurrent_grad(&traces, 0).unwrap();
        let mut untied = vec![0.0; tied.flat().len()];
        for t in 0..3 {
            let per: Vec<ForwardTrace> = traces.iter().map(|tr| step_of(tr, t)).collect();
            for (u, v) in untied.iter_mut().zip(lr_recurrent_grad(&per, 0).unwrap().flat()) {
                *u += v;
            }
        }
        assert_eq!(tied.flat(), untied, "dyadic = {dyadic}");
    }
}

/// A network whose loss ignores the first layer: the second layer has zero
/// weights and biases, so every logit is 0.
fn constant_loss_net(first: Layer) -> Network {
    let d_out = match &first {
        Layer::Dense(d) => d.d_out(),
        _ => unreachable!(),
    };
    let head = Dense::new(Tensor::zeros(&[2, d_out]), Tensor::zeros(&[2]), Activation::Identity).unwrap();
    Network::new(vec![first, Layer::Dense(head)], 2).unwrap()
}

#[test]
fn antithetic_pairs_cancel_constant_loss() {
    let first = Layer::Dense(
        Dense::new(Tensor::matrix(&[&[0.3, -0.5], &[1.2, 0.1], &[0.0, 0.7]]), Tensor::vector(&[0.1, 0.2, 0.3]), Activation::Tanh)
            .unwrap(),
    );
    let net = constant_loss_net(first);
    let batch = vec![
        Sample::class(Tensor::vector(&[0.5, -1.0]), 0),
        Sample::class(Tensor::vector(&[2.0, 0.3]), 1),
    ];
    for plan in [NoisePlan::logit_all(&net, 0.1), NoisePlan::weight_all(&net, 0.01)] {
        for qmc in [false, true] {
            let cfg = EstimatorConfig {
                copies: 2,
                qmc,
                ..EstimatorConfig::with_plan(2, plan.clone())
            };
            // Only the first layer is scored; the head's loss does depend on its own noise.
            let cfg = EstimatorConfig {
                hybrid_map: Some(vec![plan.entries[0], NoiseEntry::off()]),
                ..cfg
            };
            let g = estimate_gradient(&net, &batch, &cfg, &RngStream::new(1, 2)).unwrap();
            assert!(g.flat().iter().all(|&v| v == 0.0), "{:?}", g.flat());
            assert_eq!(g.copies_used, 4);
        }
    }
}

#[test]
fn odd_copies_with_antithetic_is_a_config_error() {
    let cfg = EstimatorConfig {
        copies: 3,
        ..Default::default()
    };
    assert!(matches!(Estimator::new(cfg), Err(Error::Config(_))));
}

fn mlp() -> Network {
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
        11,
    )
    .unwrap()
}

#[test]
fn estimates_are_reproducible() {
    let net = mlp();
    let batch = vec![Sample::class(Tensor::vector(&[0.2, 0.9]), 1)];
    for schedule in [Schedule::FullSweep, Schedule::RoundRobin, Schedule::Simultaneous] {
        let cfg = EstimatorConfig {
            copies: 40,
            schedule,
            baseline: Baseline::BatchMean,
            ..Default::default()
        };
        let a = estimate_gradient(&net, &batch, &cfg, &RngStream::new(3, 3)).unwrap();
        let b = estimate_gradient(&net, &batch, &cfg, &RngStream::new(3, 3)).unwrap();
        assert_eq!(a, b);
        let c = estimate_gradient(&net, &batch, &cfg, &RngStream::new(4, 3)).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn round_robin_visits_one_layer_per_call() {
    let net = mlp();
    let batch = vec![Sample::class(Tensor::vector(&[0.2, 0.9]), 1)];
    let mut est = Estimator::new(EstimatorConfig {
        copies: 8,
        schedule: Schedule::RoundRobin,
        ..Default::default()
    })
    .unwrap();
    let s = RngStream::new(1, 1);
    let first = est.estimate(&net, &batch, &s).unwrap();
    assert!(first.layer_flat(0).iter().any(|&v| v != 0.0));
    assert!(first.layer_flat(1).iter().all(|&v| v == 0.0));
    let second = est.estimate(&net, &batch, &s.split(1)).unwrap();
    assert_eq!(second.layer_flat(0), first.layer_flat(0));
    assert!(second.layer_flat(1).iter().any(|&v| v != 0.0));
    assert_eq!(second.copies_used, 8);
}

#[test]
fn baseline_leaves_antithetic_odd_estimates_unchanged() {
    let net = mlp();
    let batch = vec![
        Sample::class(Tensor::vector(&[0.2, 0.9]), 1),
        Sample::class(Tensor::vector(&[-1.0, 0.4]), 0),
    ];
    let plain = EstimatorConfig {
        copies: 64,
        ..Default::default()
    };
    let based = EstimatorConfig {
        baseline: Baseline::BatchMean,
        ..plain.clone()
    };
    let s = RngStream::new(2, 9);
    let a = estimate_gradient(&net, &batch, &plain, &s).unwrap();
    let b = estimate_gradient(&net, &batch, &based, &s).unwrap();
    assert_eq!(a.grads, b.grads);
}

#[test]
fn trainable_sigma_reports_sigma_gradient() {
    let net = mlp();
    let mut entry = NoiseEntry::logit(0.1);
    entry.trainable_sigma = true;
    let cfg = EstimatorConfig {
        copies: 16,
        hybrid_map: Some(vec![entry, NoiseEntry::logit(0.1)]),
        ..Default::default()
    };
    let batch = vec![Sample::class(Tensor::vector(&[0.2, 0.9]), 1)];
    let g = estimate_gradient(&net, &batch, &cfg, &RngStream::new(0, 0)).unwrap();
    assert!(g.sigma_grads[0].is_some());
    assert!(g.sigma_grads[1].is_none());
}

#[test]
fn conv_and_recurrent_layers_estimate() {
    let conv = Conv2d::new(
        Tensor::from_vec(vec![2, 1, 2, 2], (0..8).map(|v| (v as f64 * 0.3).sin()).collect()).unwrap(),
        Tensor::zeros(&[2]),
        Activation::Relu,
    )
    .unwrap();
    let head = Dense::new(
        Tensor::from_vec(vec![2, 8], (0..16).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap(),
        Tensor::zeros(&[2]),
        Activation::Identity,
    )
    .unwrap();
    let net = Network::new(vec![Layer::Conv2d(conv), Layer::Dense(head)], 2).unwrap();
    let x = Tensor::from_vec(vec![1, 3, 3], (0..9).map(|v| v as f64 / 9.0).collect()).unwrap();
    let g = estimate_gradient(
        &net,
        &[Sample::class(x, 0)],
        &EstimatorConfig {
            copies: 8,
            ..Default::default()
        },
        &RngStream::new(0, 1),
    )
    .unwrap();
    assert_eq!(g.grads[0][0].shape(), &[2, 1, 2, 2]);

    let cell = RnnCell::new(
        RnnKind::Lstm,
        Tensor::filled(&[8, 2], 0.1),
        Tensor::filled(&[8, 1], 0.2),
        Tensor::zeros(&[8]),
        Tensor::zeros(&[8]),
    )
    .unwrap();
    let head = Dense::new(Tensor::filled(&[2, 2], 0.5), Tensor::zeros(&[2]), Activation::Identity).unwrap();
    let net = Network::new(vec![Layer::Rnn(cell), Layer::Dense(head)], 2).unwrap();
    let x = Tensor::from_vec(vec![3, 1], vec![1.0, -1.0, 0.5]).unwrap();
    let g = estimate_gradient(&net, &[Sample::class(x, 1)], &EstimatorConfig::default(), &RngStream::new(0, 2))
        .unwrap();
    assert_eq!(g.grads[0].len(), 4);
    assert!(g.is_finite());
}
