mod common;

use lassr_core::classifier::{class_balanced_weights, nearest_centroid, AccuracyTable};
use lassr_core::data::stream_rng;
use lassr_core::synth::{render_leaf, Environment, Lesion, FIELD_TEST_COUNTS, FIELD_TRAIN_COUNTS};
use lassr_core::Image;
use proptest::prelude::*;

#[test]
fn weights_match_exact_arithmetic() {
    for counts in [FIELD_TRAIN_COUNTS, FIELD_TEST_COUNTS] {
        let got = class_balanced_weights(&counts, 0.9999).unwrap();
        let want = common::cb_weights_exact(&counts, 9999, 10000);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs(), "{g} vs {w}");
        }
    }
}

#[test]
fn beta_zero_is_uniform() {
    assert_eq!(class_balanced_weights(&FIELD_TRAIN_COUNTS, 0.0).unwrap(), vec![1.0; 5]);
}

#[test]
fn zero_count_is_rejected() {
    assert!(class_balanced_weights(&[3, 0, 2], 0.9).is_err());
}

#[test]
fn macro_average_discounts_the_majority_class() {
    let classes: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
    let truth = [vec![0; 80], vec![1; 10], vec![2; 10]].concat();
    let predicted = vec![0; 100];
    let t = AccuracyTable::from_predictions(&classes, &truth, &predicted).unwrap();
    assert_eq!(t.micro, 0.8);
    assert!((t.macro_avg - 1.0 / 3.0).abs() < 1e-15);
    assert!(t.macro_avg < t.micro);
}

/// Per-channel quantiles: a position-free summary of the lesion colours.
fn quantiles(img: &Image) -> Image {
    let (_, _, c) = img.dims();
    let q = 32;
    let mut data = vec![0.0; q * c];
    for ch in 0..c {
        let mut v: Vec<f64> = img.data().iter().skip(ch).step_by(c).copied().collect();
        v.sort_by(f64::total_cmp);
        for i in 0..q {
            data[i * c + ch] = v[(i * (v.len() - 1)) / (q - 1)];
        }
    }
    Image::new(1, q, c, data)
}

#[test]
fn nearest_centroid_separates_clean_leaves() {
    let env = Environment::preset(0);
    let make = |seed: u64| -> (Vec<Image>, Vec<usize>) {
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for (k, &lesion) in Lesion::ALL.iter().enumerate() {
            for i in 0..12 {
                imgs.push(quantiles(&render_leaf(&mut stream_rng(seed, &[k as u64, i]), 64, &env, lesion)));
                labels.push(k);
            }
        }
        (imgs, labels)
    };
    let (train, train_labels) = make(1);
    let (test, test_labels) = make(2);
    let predicted = nearest_centroid((&train, &train_labels), 5, &test);
    let correct = predicted.iter().zip(&test_labels).filter(|(a, b)| a == b).count();
    assert!(correct as f64 / test.len() as f64 >= 0.9, "{correct}/{}", test.len());
}

proptest! {
    #[test]
    fn weights_sum_to_class_count_and_fall_with_count(counts in prop::collection::vec(1usize..5000, 1..8), beta in 0.0f64..0.9999) {
        let w = class_balanced_weights(&counts, beta).unwrap();
        prop_assert!((w.iter().sum::<f64>() - counts.len() as f64).abs() < 1e-9);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] >= w[j] - 1e-12);
                }
            }
        }
    }
}
