mod common;

use lassr_core::checkpoint;
use lassr_core::losses::IdentityExtractor;
use lassr_core::trainer::{latest_checkpoint, train, RunOptions, StepRecord, TrainSetup, TrainState};
use lassr_core::{Error, Image};

fn setup() -> TrainSetup {
    let mut s = TrainSetup::desk(64, 4, 21);
    s.model.generator.base_channels = 4;
    s.model.generator.growth_channels = 4;
    s.model.discriminator.block_channels = vec![4, 4, 8, 8, 8, 8];
    s.model.discriminator.dense_units = 16;
    s.train.adam_lr = 1e-3;
    s.train.epochs = 3;
    s
}

fn losses(records: &[StepRecord]) -> Vec<(u64, [f64; 6])> {
    records.iter().map(|r| (r.step, r.losses())).collect()
}

fn images() -> Vec<Image> {
    common::leaves(8, 96, 3)
}

#[test]
fn twin_runs_are_identical() {
    let imgs = images();
    let mut a = TrainState::new(setup()).unwrap();
    let mut b = TrainState::new(setup()).unwrap();
    let ra = train(&mut a, &imgs, &IdentityExtractor, RunOptions::default()).unwrap();
    let rb = train(&mut b, &imgs, &IdentityExtractor, RunOptions::default()).unwrap();
    assert_eq!(ra.len(), 6);
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(a.generator.params(), b.generator.params());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let imgs = images();
    let tmp = tempfile::tempdir().unwrap();
    let mut full = TrainState::new(setup()).unwrap();
    let whole = train(&mut full, &imgs, &IdentityExtractor, RunOptions::default()).unwrap();

    let mut part = TrainState::new(setup()).unwrap();
    let opts = RunOptions { checkpoint_dir: Some(tmp.path().to_path_buf()), stop_at: Some(3), ..Default::default() };
    let first = train(&mut part, &imgs, &IdentityExtractor, opts).unwrap();
    drop(part);
    let path = latest_checkpoint(tmp.path()).unwrap().expect("a checkpoint was written");
    let mut resumed = checkpoint::load(&path).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = train(&mut resumed, &imgs, &IdentityExtractor, RunOptions::default()).unwrap();

    let stitched: Vec<_> = first.iter().chain(&rest).cloned().collect();
    assert_eq!(losses(&stitched), losses(&whole));
    assert_eq!(resumed.generator.params(), full.generator.params());
    assert_eq!(resumed.discriminator.params(), full.discriminator.params());
}

#[test]
fn every_logged_step_recombines_to_its_total() {
    let imgs = images();
    let mut s = setup();
    s.train.warmup_l1_steps = 2;
    s.train.arm_delay_steps = 4;
    let w = s.loss.weights();
    let mut st = TrainState::new(s).unwrap();
    let records = train(&mut st, &imgs, &IdentityExtractor, RunOptions::default()).unwrap();
    for r in &records {
        // steps are 1-based; the ARM term switches on after step 4
        let beta = if r.step <= 4 { 0.0 } else { w.beta_arm };
        let want = w.lambda_adv * r.adv_g + r.percep + w.eta_l1 * r.l1 + beta * r.arm;
        assert!((want - r.total).abs() < 1e-12, "step {}: {want} vs {}", r.step, r.total);
    }
    assert!(records[..2].iter().all(|r| r.adv_g == 0.0 && r.arm == 0.0));
}

#[test]
fn warmup_overfits_a_single_image() {
    let img = common::leaves(1, 64, 8);
    let mut s = setup();
    s.train.batch_size = 1;
    s.train.epochs = 60;
    s.train.warmup_l1_steps = 60;
    s.train.augment = false;
    s.model.generator.bicubic_skip = false;
    let mut st = TrainState::new(s).unwrap();
    let r = train(&mut st, &img, &IdentityExtractor, RunOptions::default()).unwrap();
    let head = r[..5].iter().map(|x| x.l1).sum::<f64>() / 5.0;
    let tail = r[r.len() - 5..].iter().map(|x| x.l1).sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "l1 {head} -> {tail}");
}

#[test]
fn flipped_byte_fails_the_digest() {
    let st = TrainState::new(setup()).unwrap();
    let mut bytes = checkpoint::to_bytes(&st).unwrap();
    let i = bytes.len() - 100;
    bytes[i] ^= 1;
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
}
