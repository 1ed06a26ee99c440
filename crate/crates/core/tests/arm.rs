mod common;

use lassr_core::arm::{arm_loss, detect_blobs, subtract, ArmConfig, ResidualImage};
use lassr_core::synth::inject_stamp;
use proptest::prelude::*;

use common::{brute_force_blobs, planted, random_image};

#[test]
fn detector_matches_brute_force_dog() {
    let cfg = ArmConfig::default();
    for seed in 0..6 {
        let (res, _) = planted(96, (seed % 4) as usize, seed);
        let mut got: Vec<_> = detect_blobs(&res, &cfg).unwrap().into_iter().map(|b| (b.row, b.col, b.mass)).collect();
        got.sort_by_key(|&(r, c, _)| (r, c));
        let want = brute_force_blobs(&res, &cfg);
        assert_eq!(got.len(), want.len(), "seed {seed}");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.0, g.1), (w.0, w.1));
            assert!((g.2 - w.2).abs() < 1e-9);
        }
    }
}

#[test]
fn planted_bump_is_found_near_its_center() {
    let (res, centers) = planted(96, 1, 11);
    let blobs = detect_blobs(&res, &ArmConfig::default()).unwrap();
    let (cy, cx) = centers[0];
    assert!(blobs.iter().any(|b| (b.row as f64 - cy).abs() <= 1.0 && (b.col as f64 - cx).abs() <= 1.0), "{blobs:?}");
}

#[test]
fn loss_is_the_sum_of_blob_masses() {
    let cfg = ArmConfig::default();
    let hr = random_image(64, 3).clamp01();
    let mut sr = hr.clone();
    inject_stamp(&mut sr, (20, 30), 6.0, 0.5);
    inject_stamp(&mut sr, (45, 12), 5.0, 0.4);
    let blobs = detect_blobs(&subtract(&sr, &hr).unwrap(), &cfg).unwrap();
    assert!(!blobs.is_empty());
    let mass: f64 = blobs.iter().map(|b| b.mass).sum();
    assert!((arm_loss(&sr, &hr, &cfg).unwrap() - mass).abs() < 1e-12);
}

#[test]
fn flat_residual_has_no_blobs() {
    let res = ResidualImage::new(64, 64, vec![0.3; 64 * 64], 64);
    assert!(detect_blobs(&res, &ArmConfig::default()).unwrap().is_empty());
}

fn residual_strategy() -> impl Strategy<Value = ResidualImage> {
    (0usize..4, any::<u64>()).prop_map(|(bumps, seed)| planted(64, bumps, seed).0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_images_cost_nothing(seed in any::<u64>()) {
        let img = random_image(48, seed);
        prop_assert_eq!(arm_loss(&img, &img, &ArmConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn horizontal_flip_mirrors_blobs(res in residual_strategy()) {
        let cfg = ArmConfig::default();
        let a = detect_blobs(&res, &cfg).unwrap();
        let b = detect_blobs(&res.flip_horizontal(), &cfg).unwrap();
        prop_assert_eq!(a.len(), b.len());
        let ma: f64 = a.iter().map(|x| x.mass).sum();
        let mb: f64 = b.iter().map(|x| x.mass).sum();
        prop_assert!((ma - mb).abs() < 1e-9);
        let mut pa: Vec<_> = a.iter().map(|x| (x.row, res.width - 1 - x.col)).collect();
        let mut pb: Vec<_> = b.iter().map(|x| (x.row, x.col)).collect();
        pa.sort();
        pb.sort();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn higher_threshold_keeps_a_subset(res in residual_strategy(), lo in 0.0f64..0.05, extra in 0.0f64..0.05) {
        let low = ArmConfig { response_threshold: lo, ..ArmConfig::default() };
        let high = ArmConfig { response_threshold: lo + extra, ..ArmConfig::default() };
        let a = detect_blobs(&res, &low).unwrap();
        let b = detect_blobs(&res, &high).unwrap();
        prop_assert!(b.len() <= a.len());
        prop_assert!(b.iter().all(|x| a.iter().any(|y| (y.row, y.col) == (x.row, x.col))));
    }

    #[test]
    fn masses_are_non_negative(res in residual_strategy()) {
        prop_assert!(detect_blobs(&res, &ArmConfig::default()).unwrap().iter().all(|b| b.mass >= 0.0));
    }
}
