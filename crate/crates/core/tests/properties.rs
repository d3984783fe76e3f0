use lrgrad::numerics::{gaussian_from_uniform, RngStream};
use lrgrad::oracle::cosine_similarity;
use lrgrad::training::{cross_entropy_loss, softmax};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| (prop::collection::vec(-1e3..1e3f64, n), prop::collection::vec(-1e3..1e3f64, n)))
}

proptest! {
    #[test]
    fn cosine_is_symmetric_bounded_and_scale_free((a, b) in vectors(), scale in 1e-3..1e3f64) {
        let s = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s.value));
        prop_assert_eq!(s, cosine_similarity(&b, &a).unwrap());
        if !s.degenerate {
            let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
            prop_assert!((cosine_similarity(&scaled, &b).unwrap().value - s.value).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_matches_reference(u in 1e-12..(1.0 - 1e-12)) {
        let reference = Normal::new(0.0, 1.0).unwrap().inverse_cdf(u);
        let ours = gaussian_from_uniform(u).unwrap();
        prop_assert!((ours - reference).abs() <= 1e-9 * reference.abs().max(1.0), "{ours} vs {reference}");
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0..700.0f64, 2..10)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for label in 0..logits.len() {
            let l = cross_entropy_loss(&logits, label).unwrap();
            prop_assert!(l.is_finite() && l >= 0.0);
        }
    }

    #[test]
    fn derived_streams_are_reproducible(seed: u64, id: u64, key: u64) {
        let mut a = RngStream::new(seed, id).derive(&[key]);
        let mut b = RngStream::new(seed, id).derive(&[key]);
        let mut c = RngStream::new(seed, id).derive(&[key.wrapping_add(1)]);
        let xa: Vec<f64> = (0..4).map(|_| a.next_gaussian()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.next_gaussian()).collect();
        let xc: Vec<f64> = (0..4).map(|_| c.next_gaussian()).collect();
        prop_assert_eq!(&xa, &xb);
        prop_assert_ne!(&xa, &xc);
    }
}
