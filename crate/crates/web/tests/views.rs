use lassr_web::{class_weights, planted_residual, BlobView, ProfileView};
use serde_json::Value;

#[test]
fn blob_view_finds_planted_bumps() {
    let view = BlobView::new(96, 2, 1, 0.02).unwrap();
    assert_eq!(view.pixels().len(), 96 * 96 * 4);
    let report: Value = serde_json::from_str(&view.report()).unwrap();
    let n = report["blobs"].as_array().unwrap().len();
    assert!((1..=2).contains(&n), "{n} blobs");
    assert!(report["arm_loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn empty_residual_has_no_blobs() {
    let view = BlobView::new(96, 0, 4, 0.02).unwrap();
    let report: Value = serde_json::from_str(&view.report()).unwrap();
    assert!(report["blobs"].as_array().unwrap().is_empty());
    assert_eq!(planted_residual(32, 0, 4).data.len(), 32 * 32);
}

#[test]
fn profile_view_reports_both_curves() {
    let view = ProfileView::new(64, 3, 1, 500).unwrap();
    assert_eq!(view.hr().len(), 64 * 64 * 4);
    let report: Value = serde_json::from_str(&view.report()).unwrap();
    assert_eq!(report["row"], 63);
    assert_eq!(report["hr"].as_array().unwrap().len(), 64);
    assert!(report["psnr_db"].as_f64().unwrap() > 15.0);
}

#[test]
fn weights_sum_to_class_count() {
    let w = class_weights(&[13089, 5142, 4356, 10451, 2514], 0.9999).unwrap();
    assert!((w.iter().sum::<f64>() - 5.0).abs() < 1e-12);
    assert!(w[4] > w[0]);
}
