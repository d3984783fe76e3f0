use super::graph::parse_edge_list;
use super::idx::parse_idx;
use super::tokens::parse_tokens;
use super::*;
use crate::error::Error;

fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend_from_slice(&[0, 51, 255, 102]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
    (images, labels)
}

fn format_offset(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn idx_fixture_gives_one_scaled_image() {
    let (img, lab) = idx_fixture();
    let ds = parse_idx(&img, &lab, None).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.classes, 8);
    assert_eq!(ds.samples[0].input.shape(), &[1, 2, 2]);
    assert_eq!(ds.samples[0].input.data(), &[0.0, 0.2, 1.0, 0.4]);
    assert_eq!(ds.labels(), vec![7]);
}

#[test]
fn idx_limit_zero_is_empty() {
    let (img, lab) = idx_fixture();
    assert!(parse_idx(&img, &lab, Some(0)).unwrap().is_empty());
}

#[test]
fn idx_errors_carry_offsets() {
    let (img, lab) = idx_fixture();
    let mut bad = img.clone();
    bad[3] = 1;
    assert_eq!(format_offset(parse_idx(&bad, &lab, None).unwrap_err()), 0);
    assert_eq!(format_offset(parse_idx(&img[..18], &lab, None).unwrap_err()), 18);
    assert_eq!(format_offset(parse_idx(&img[..10], &lab, None).unwrap_err()), 8);
    let mut two = lab.clone();
    two[7] = 2;
    assert_eq!(format_offset(parse_idx(&img, &two, None).unwrap_err()), 4);
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stream = RngStream::new(3, 0);
    let mut rng = stream.clone();
    let samples = (0..5)
        .map(|i| {
            let px = (0..12).map(|_| rng.next_below(256) as f64 / 255.0).collect();
            Sample::class(Tensor::from_vec(vec![1, 3, 4], px).unwrap(), i % 3)
        })
        .collect();
    let ds = Dataset::new(samples, 3).unwrap();
    let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ds, &i, &l).unwrap();
    let back = load_idx(&i, &l, None).unwrap();
    assert_eq!(back.classes, 3);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.input, b.input);
        assert_eq!(a.target, b.target);
    }
}

#[test]
fn one_edge_gives_degree_two() {
    let g = parse_edge_list("a 1.0 0\nb 2.0 1\n", "a b\n").unwrap();
    assert_eq!(g.degree_tilde(), vec![2.0, 2.0]);
    assert_eq!(g.features.data(), &[1.0, 2.0]);
    assert_eq!(g.classes, 2);
}

#[test]
fn empty_edge_file_leaves_identity() {
    let g = parse_edge_list("x 0.5 0.5 3\ny 1 1 3\nz 2 2 4\n", "").unwrap();
    let a = g.adjacency_tilde();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(a.data()[i * 3 + j], f64::from(u8::from(i == j)));
        }
    }
    assert_eq!(g.labels, vec![0, 0, 1]);
}

#[test]
fn duplicate_edges_collapse() {
    let g = parse_edge_list("0 1 0\n1 1 0\n2 1 1\n", "0 1\n1 0\n0 1\n# note\n\n1 2\n").unwrap();
    assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
}

#[test]
fn dangling_edge_names_the_id() {
    let err = parse_edge_list("0 1 0\n1 1 0\n", "0 1\n0 q7\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("q7"), "{msg}");
    assert_eq!(format_offset(err), 4);
}

#[test]
fn ragged_node_features_rejected() {
    assert!(matches!(
        parse_edge_list("0 1 2 0\n1 1 0\n", ""),
        Err(Error::Format { offset: 8, .. })
    ));
}

#[test]
fn edge_list_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let features = Tensor::from_vec(vec![3, 2], vec![0.1, -2.5, 1e-300, 3.0, 7.25, 0.3]).unwrap();
    let g = GraphData::new(features, [(0, 2), (1, 2)], vec![1, 0, 1], 2, vec![], vec![]).unwrap();
    let (n, e) = (dir.path().join("nodes"), dir.path().join("edges"));
    write_edge_list(&g, &n, &e).unwrap();
    assert_eq!(load_edge_list(&n, &e).unwrap(), g);
}

#[test]
fn split_nodes_takes_per_class_quota() {
    let labels = vec![0, 0, 0, 1, 1, 1, 1, 0];
    let g = GraphData::new(Tensor::zeros(&[8, 1]), [], labels.clone(), 2, vec![], vec![]).unwrap();
    let s = split_nodes(&g, 2, &RngStream::new(1, 0)).unwrap();
    assert_eq!(s.train_nodes.len(), 4);
    assert_eq!(s.test_nodes.len(), 4);
    for c in 0..2 {
        assert_eq!(s.train_nodes.iter().filter(|&&i| labels[i] == c).count(), 2);
    }
    let split = Dataset::from_graph(s).unwrap();
    assert_eq!(split.train.len(), 1);
}

#[test]
fn token_line_counts() {
    let ds = parse_tokens("1 a b a\n", 100).unwrap();
    assert_eq!(ds.vocab, vec!["a", "b"]);
    assert_eq!(ds.samples[0].input.data(), &[2.0, 3.0, 2.0]);
    assert_eq!(ds.classes, 1);
}

#[test]
fn vocab_limit_one_is_all_oov() {
    let ds = parse_tokens("1 a b a\n2 c\n", 1).unwrap();
    assert!(ds.vocab.is_empty());
    for s in &ds.samples {
        assert!(s.input.data().iter().all(|&t| t == OOV_TOKEN as f64));
    }
}

#[test]
fn frequency_ties_follow_first_occurrence() {
    let ds = parse_tokens("0, z y x\n1, x y w w\n", 4).unwrap();
    // x, y and w appear twice and z once. Only two word slots fit, and the
    // tie goes to y (first seen at position 1) over x (2) and w (5).
    assert_eq!(ds.vocab, vec!["y", "x"]);
    assert_eq!(ds.samples[1].input.data(), &[3.0, 2.0, 1.0, 1.0]);
    assert_eq!(ds.labels(), vec![0, 1]);
}

#[test]
fn empty_token_file_is_a_format_error() {
    assert!(matches!(parse_tokens("\n# nothing\n", 10), Err(Error::Format { .. })));
    assert!(matches!(parse_tokens("3\n", 10), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn token_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = parse_tokens("0 the cat sat\n1 the dog ran far\n0 a cat\n", 50).unwrap();
    let path = dir.path().join("tokens.txt");
    write_token_file(&ds, &path).unwrap();
    let back = load_token_csv(&path, 50).unwrap();
    assert_eq!(back.vocab, ds.vocab);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.input, b.input);
        assert_eq!(a.target, b.target);
    }
}

#[test]
fn labels_sort_numerically() {
    let ds = parse_tokens("10 a\n9 b\n2 c\n", 10).unwrap();
    assert_eq!(ds.labels(), vec![2, 1, 0]);
}

#[test]
fn blobs_are_deterministic_and_separable() {
    let stream = RngStream::new(11, 4);
    let a = synth_blobs(2, 2000, 2, 10.0, &stream).unwrap();
    let b = synth_blobs(2, 2000, 2, 10.0, &stream).unwrap();
    assert_eq!(a.len(), 4000);
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.input, y.input);
    }
    // Centres sit at (-5, -5) and (5, -5), so the Bayes rule is the sign of x0
    // with error Phi(-5), about 3e-7.
    let correct = a
        .samples
        .iter()
        .filter(|s| {
            let pred = usize::from(s.input.data()[0] > 0.0);
            s.target == Target::Class(pred)
        })
        .count();
    assert!(correct as f64 / a.len() as f64 >= 0.999);
}

#[test]
fn blobs_zero_per_class_is_empty() {
    assert!(synth_blobs(3, 0, 2, 1.0, &RngStream::new(0, 0)).unwrap().is_empty());
    assert!(synth_blobs(5, 1, 2, 1.0, &RngStream::new(0, 0)).is_err());
    assert!(synth_blobs(2, 1, 2, 0.0, &RngStream::new(0, 0)).is_err());
}

#[test]
fn select_and_split() {
    let ds = synth_blobs(4, 10, 2, 4.0, &RngStream::new(2, 0)).unwrap();
    let two = ds.select_classes(&[3, 1]).unwrap();
    assert_eq!(two.len(), 20);
    assert_eq!(two.labels()[..10], [1; 10]);
    let split = two.split(0.25, &RngStream::new(5, 0)).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (15, 5));
}
