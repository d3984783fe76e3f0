use std::collections::BTreeSet;
use std::sync::Arc;

use super::*;
use crate::layers::{Activation, Dense, GraphData, Layer, LayerSpec};
use crate::numerics::Tensor;

/// Logits `(-x, x)` for a scalar input: the class-0 loss increases with `x`.
fn scalar_logistic() -> Network {
    let d = Dense::new(Tensor::matrix(&[&[-1.0], &[1.0]]), Tensor::zeros(&[2]), Activation::Identity).unwrap();
    Network::new(vec![Layer::Dense(d)], 2).unwrap()
}

fn image_net() -> Network {
    Network::from_specs(
        &[
            LayerSpec::Dense {
                d_in: 6,
                d_out: 5,
                activation: Activation::Tanh,
                init_scale: 1.0,
            },
            LayerSpec::Dense {
                d_in: 5,
                d_out: 3,
                activation: Activation::Identity,
                init_scale: 1.0,
            },
        ],
        3,
        21,
    )
    .unwrap()
}

fn image(seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, 0);
    Tensor::from_vec(vec![2, 1, 3], rng.uniform_stream(6)).unwrap()
}

#[test]
fn fgsm_steps_by_the_budget_along_the_gradient() {
    let s = Sample::class(Tensor::vector(&[0.5]), 0);
    let out = adversarial_example(&scalar_logistic(), &s, &AttackSpec::new(AttackMethod::Fgsm)).unwrap();
    assert!(!out.degenerate);
    assert_eq!(out.input.data(), &[0.5 + 8.0 / 255.0]);
}

#[test]
fn zero_gradient_returns_the_input() {
    let d = Dense::new(Tensor::zeros(&[2, 1]), Tensor::vector(&[0.3, 0.0]), Activation::Identity).unwrap();
    let net = Network::new(vec![Layer::Dense(d)], 2).unwrap();
    let s = Sample::class(Tensor::vector(&[0.5]), 1);
    for m in [AttackMethod::Fgsm, AttackMethod::Ifgsm, AttackMethod::Mifgsm] {
        let out = adversarial_example(&net, &s, &AttackSpec::new(m)).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.input, s.input);
    }
}

#[test]
fn zero_budget_is_the_identity() {
    let net = image_net();
    let s = Sample::class(image(1), 2);
    let out = adversarial_example(&net, &s, &AttackSpec::new(AttackMethod::Fgsm).with_epsilon(0.0)).unwrap();
    assert_eq!(out.input, s.input);
}

#[test]
fn iterative_attacks_stay_in_the_budget() {
    let net = image_net();
    for seed in 0..20 {
        let s = Sample::class(image(seed), (seed % 3) as usize);
        for m in [AttackMethod::Fgsm, AttackMethod::Ifgsm, AttackMethod::Mifgsm] {
            for eps in [8.0 / 255.0, 0.1] {
                let mut spec = AttackSpec::new(m).with_epsilon(eps);
                spec.iterations = 15;
                spec.step_size = Some(0.01);
                let x = adversarial_example(&net, &s, &spec).unwrap().input;
                assert_eq!(x.shape(), s.input.shape());
                for (a, b) in x.data().iter().zip(s.input.data()) {
                    assert!((a - b).abs() <= eps && (0.0..=1.0).contains(a));
                }
            }
        }
    }
}

#[test]
fn attacks_do_not_raise_the_loss_target_accuracy() {
    let net = image_net();
    let samples: Vec<Sample> = (0..30).map(|i| Sample::class(image(i), net.predict(&Sample::class(image(i), 0)).unwrap()[0])).collect();
    let clean = accuracy(&net, &samples).unwrap();
    assert_eq!(clean, 1.0);
    let spec = AttackSpec::new(AttackMethod::Ifgsm).with_epsilon(0.3);
    let attacked = evaluate_accuracy(&net, &samples, Some(&spec), &RngStream::new(0, 0)).unwrap();
    assert!(attacked < clean);
}

#[test]
fn accuracy_reference_cases() {
    // Constant predictions over 4 balanced classes.
    let d = Dense::new(Tensor::zeros(&[4, 1]), Tensor::vector(&[1.0, 0.0, 0.0, 0.0]), Activation::Identity).unwrap();
    let net = Network::new(vec![Layer::Dense(d)], 4).unwrap();
    let samples: Vec<Sample> = (0..8).map(|i| Sample::class(Tensor::vector(&[i as f64]), i % 4)).collect();
    assert_eq!(accuracy(&net, &samples).unwrap(), 0.25);
    assert!(accuracy(&net, &[]).is_err());
}

#[test]
fn shuffle_preserves_tokens() {
    let x = Tensor::vector(&[3.0, 7.0, 7.0, 2.0, 9.0, 4.0]);
    let y = corrupt(&x, &AttackSpec::new(AttackMethod::Shuffle), &mut RngStream::new(2, 0)).unwrap();
    let mut a = x.data().to_vec();
    let mut b = y.data().to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn sequence_mask_count_follows_the_ratio() {
    let x = Tensor::vector(&(2..12).map(f64::from).collect::<Vec<_>>());
    for seed in 0..10 {
        let y = corrupt(&x, &AttackSpec::new(AttackMethod::RanmaskSeq).with_ratio(0.9), &mut RngStream::new(seed, 0)).unwrap();
        assert_eq!(y.data().iter().filter(|&&v| v == MASK_TOKEN as f64).count(), 9);
    }
    assert_eq!(ratio_count(0.9, 10), 9);
    assert_eq!(ratio_count(0.25, 10), 3);
    assert_eq!(ratio_count(0.0, 10), 0);
}

#[test]
fn grey_replicates_the_channel_mean() {
    let equal = Tensor::from_vec(vec![3, 1, 2], vec![0.2, 0.4, 0.2, 0.4, 0.2, 0.4]).unwrap();
    let spec = AttackSpec::new(AttackMethod::Grey);
    assert_eq!(corrupt(&equal, &spec, &mut RngStream::new(0, 0)).unwrap(), equal);
    let rgb = Tensor::from_vec(vec![3, 1, 1], vec![0.0, 0.3, 0.9]).unwrap();
    let g = corrupt(&rgb, &spec, &mut RngStream::new(0, 0)).unwrap();
    assert!(g.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
}

#[test]
fn image_corruptions_keep_range_and_shape() {
    let x = image(5);
    for m in [
        AttackMethod::Gaussian,
        AttackMethod::Uniform,
        AttackMethod::Poisson,
        AttackMethod::Grey,
        AttackMethod::RanmaskImage,
    ] {
        let spec = AttackSpec::new(m).with_epsilon(0.5);
        let y = corrupt(&x, &spec, &mut RngStream::new(3, 1)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{m:?}");
    }
    let masked = corrupt(&Tensor::filled(&[10], 1.0), &AttackSpec::new(AttackMethod::RanmaskImage), &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(masked.data().iter().filter(|&&v| v == 0.0).count(), 5);
}

#[test]
fn poisson_noise_is_unbiased() {
    let x = Tensor::filled(&[4000], 0.3);
    let y = corrupt(&x, &AttackSpec::new(AttackMethod::Poisson), &mut RngStream::new(8, 0)).unwrap();
    let mean = y.data().iter().sum::<f64>() / 4000.0;
    // sd of one pixel is sqrt(0.3 / 255) ~ 0.034, so the mean has sd ~ 5e-4.
    assert!((mean - 0.3).abs() < 3e-3);
}

#[test]
fn mismatched_modalities_are_rejected() {
    let mut rng = RngStream::new(0, 0);
    assert!(corrupt(&image(0), &AttackSpec::new(AttackMethod::Shuffle), &mut rng).is_err());
    assert!(corrupt(&Tensor::vector(&[4.0, 2.0]), &AttackSpec::new(AttackMethod::Gaussian), &mut rng).is_err());
    assert!(corrupt(&image(0), &AttackSpec::new(AttackMethod::Fgsm), &mut rng).is_err());
    assert!(corrupt(&image(0), &AttackSpec::new(AttackMethod::Dice), &mut rng).is_err());
    let mut bad = AttackSpec::new(AttackMethod::Gaussian);
    bad.ratio = Some(1.5);
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

/// Two classes on six nodes: a triangle of class 0, a path of class 1 and one
/// cross edge.
fn six_nodes() -> GraphData {
    GraphData::new(
        Tensor::from_vec(vec![6, 2], (0..12).map(f64::from).collect()).unwrap(),
        [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (2, 3)],
        vec![0, 0, 0, 1, 1, 1],
        2,
        vec![0, 3],
        vec![1, 2, 4, 5],
    )
    .unwrap()
}

fn edge_set(g: &GraphData) -> BTreeSet<(usize, usize)> {
    g.edges().iter().copied().collect()
}

#[test]
fn zero_ratio_leaves_the_graph() {
    let g = six_nodes();
    for m in [AttackMethod::RandomEdge, AttackMethod::Dice] {
        let out = graph_attack(&g, &AttackSpec::new(m).with_ratio(0.0), &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out.graph, g);
    }
}

#[test]
fn random_edges_are_new_and_counted() {
    let ten: Vec<(usize, usize)> = (0..10).map(|i| (i, i + 1)).collect();
    let g = GraphData::new(Tensor::zeros(&[11, 1]), ten, vec![0; 11], 1, vec![], vec![]).unwrap();
    for seed in 0..20 {
        let out = graph_attack(&g, &AttackSpec::new(AttackMethod::RandomEdge).with_ratio(0.5), &mut RngStream::new(seed, 0)).unwrap();
        assert_eq!(out.added.len(), 5);
        assert!(!out.capped);
        let before = edge_set(&g);
        let after = edge_set(&out.graph);
        assert_eq!(after.len(), 15);
        assert!(out.added.iter().all(|e| !before.contains(e) && after.contains(e)));
    }
}

#[test]
fn dice_respects_labels_exhaustively() {
    let g = six_nodes();
    for ratio in [0.1, 0.3, 0.5, 0.8, 1.0] {
        for seed in 0..25 {
            let out = graph_attack(&g, &AttackSpec::new(AttackMethod::Dice).with_ratio(ratio), &mut RngStream::new(seed, 3)).unwrap();
            let want = ratio_count(ratio, 6);
            assert_eq!(out.removed.len(), want / 2);
            assert_eq!(out.added.len() + out.removed.len(), want);
            let (before, after) = (edge_set(&g), edge_set(&out.graph));
            for &(i, j) in &out.removed {
                assert_eq!(g.labels[i], g.labels[j]);
                assert!(before.contains(&(i, j)) && !after.contains(&(i, j)));
            }
            for &(i, j) in &out.added {
                assert_ne!(g.labels[i], g.labels[j]);
                assert!(!before.contains(&(i, j)) && after.contains(&(i, j)));
            }
            // Nothing else changed.
            let expected: BTreeSet<_> = before
                .difference(&out.removed.iter().copied().collect())
                .copied()
                .chain(out.added.iter().copied())
                .collect();
            assert_eq!(after, expected);
            for i in 0..6 {
                assert!(out.graph.neighborhood(i).contains(&i));
            }
            let a = out.graph.normalized_adjacency();
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(a.at2(i, j), a.at2(j, i));
                }
            }
        }
    }
}

#[test]
fn saturated_graph_caps_the_request() {
    let complete: Vec<(usize, usize)> = (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j))).collect();
    let g = GraphData::new(Tensor::zeros(&[4, 1]), complete, vec![0, 1, 0, 1], 2, vec![], vec![]).unwrap();
    let out = graph_attack(&g, &AttackSpec::new(AttackMethod::RandomEdge).with_ratio(1.0), &mut RngStream::new(0, 0)).unwrap();
    assert!(out.capped && out.added.is_empty());
}

#[test]
fn graph_attacks_apply_per_sample() {
    let g = Arc::new(six_nodes());
    let net = Network::from_specs(
        &[LayerSpec::Gcn {
            d_in: 2,
            d_out: 2,
            activation: Activation::Identity,
            init_scale: 1.0,
        }],
        2,
        0,
    )
    .unwrap();
    let s = Sample::nodes(g.clone(), g.test_nodes.clone());
    let spec = AttackSpec::new(AttackMethod::RandomEdge).with_ratio(1.0);
    let a = evaluate_accuracy(&net, &[s.clone()], Some(&spec), &RngStream::new(1, 1)).unwrap();
    let b = evaluate_accuracy(&net, &[s], Some(&spec), &RngStream::new(1, 1)).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
}
