mod common;

use lassr_core::arm::ArmConfig;
use lassr_core::data::stream_rng;
use lassr_core::evaluator::{artifact_audit, fid, EmbeddingSet};
use lassr_core::synth::inject_stamp;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, &[77]);
    let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..d).map(|i| shift + (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>()).collect()
        })
        .collect()
}

fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(d, d, |i, j| {
        rows.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1) as f64
    });
    (mu, cov)
}

/// Trace of sqrt(A B) from the (generally non-symmetric) product's complex
/// eigenvalues.
fn fid_via_product(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let prod = &ca * &cb;
    let cross: f64 = prod.complex_eigenvalues().iter().map(|l| l.sqrt().re).sum();
    let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    dmu + ca.trace() + cb.trace() - 2.0 * cross
}

#[test]
fn one_dimensional_closed_form() {
    let a: Vec<Vec<f64>> = [1.0, 2.0, 4.0, 5.0].iter().map(|&v| vec![v]).collect();
    let b: Vec<Vec<f64>> = [0.0, 6.0, 9.0].iter().map(|&v| vec![v]).collect();
    let (mu_a, var_a): (f64, f64) = (3.0, 10.0 / 3.0);
    let (mu_b, var_b): (f64, f64) = (5.0, 21.0);
    let want = (mu_a - mu_b) * (mu_a - mu_b) + var_a + var_b - 2.0 * (var_a * var_b).sqrt();
    let got = fid(&EmbeddingSet::new("t", a).unwrap(), &EmbeddingSet::new("t", b).unwrap()).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn matches_the_product_eigenvalue_route() {
    let a = gaussian_rows(60, 6, 0.0, 1);
    let b = gaussian_rows(50, 6, 0.4, 2);
    let want = fid_via_product(&a, &b);
    let got = fid(&EmbeddingSet::new("t", a).unwrap(), &EmbeddingSet::new("t", b).unwrap()).unwrap();
    assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn too_few_rows_is_an_error() {
    let one = EmbeddingSet::new("t", vec![vec![1.0, 2.0]]).unwrap();
    assert!(fid(&one, &one).is_err());
}

#[test]
fn audit_flags_exactly_the_stamped_images() {
    let hr = common::leaves(100, 96, 5);
    let mut rng = stream_rng(5, &[78]);
    let mut stamped = Vec::new();
    let pairs: Vec<_> = hr
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut sr = h.clone();
            if i % 4 == 1 {
                let c = (rng.random_range(20..76), rng.random_range(20..76));
                inject_stamp(&mut sr, c, 6.0, 0.45);
                stamped.push(format!("{i:03}"));
            }
            (format!("{i:03}"), sr, h.clone())
        })
        .collect();
    let report = artifact_audit(&pairs, &ArmConfig::default()).unwrap();
    let flagged: Vec<String> = report.per_image.iter().filter(|a| a.blob_count > 0).map(|a| a.path.clone()).collect();
    assert_eq!(flagged, stamped);
    assert_eq!(report.artifact_rate, Some(0.25));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn symmetric_non_negative_and_zero_on_self(seed in 0u64..1000, shift in -1.0f64..1.0) {
        let a = EmbeddingSet::new("t", gaussian_rows(30, 4, 0.0, seed)).unwrap();
        let b = EmbeddingSet::new("t", gaussian_rows(25, 4, shift, seed + 1)).unwrap();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-9);
    }
}
