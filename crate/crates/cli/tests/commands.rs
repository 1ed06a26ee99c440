use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lassr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lassr")).args(args).env_remove("LASSR_CONFIG").output().expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: Output) -> Value {
    assert!(!out.status.success(), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DESK_TOML: &str = r#"
seed = 3

[model.generator]
num_rrdb = 1
base_channels = 4
growth_channels = 4
bicubic_skip = true

[model.discriminator]
input_size = 64
block_channels = [4, 4, 8, 8, 8, 8]
dense_units = 16

[train]
patch_size = 64
batch_size = 32
adam_lr = 1e-3

[loss]
perceptual = "identity"
"#;

fn desk_config(dir: &Path) -> PathBuf {
    let path = dir.join("desk.toml");
    std::fs::write(&path, DESK_TOML).unwrap();
    path
}

fn synth(dir: &Path, n: usize, test_fraction: f64) -> PathBuf {
    let out = dir.join("corpus");
    let n = n.to_string();
    let tf = test_fraction.to_string();
    ok_json(lassr(&["synth-data", "--out", s(&out), "--n-images", &n, "--image-size", "96", "--test-fraction", &tf, "--seed", "7"]));
    out
}

#[test]
fn help_lists_every_key_with_defaults() {
    let out = lassr(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for line in [
        "loss.lambda_adv = 0.005",
        "loss.eta_l1 = 0.01",
        "loss.beta_arm = 0.005",
        "train.batch_size = 32",
        "train.epochs = 400",
        "arm.sigma1_ratio = 0.078",
        "arm.sigma2_ratio = 0.104",
        "model.generator.num_rrdb = 23",
        "classify.cb_beta = 0.9999",
        "eval.overlap = 16",
        "seed = 0",
    ] {
        assert!(text.contains(line), "missing {line:?} in help");
    }
    for sub in ["synth-data", "train", "sr", "audit", "fid", "profile", "classify"] {
        assert!(text.contains(sub), "missing subcommand {sub}");
    }
}

#[test]
fn synth_data_is_seeded_and_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let v = ok_json(lassr(&["synth-data", "--out", s(dir), "--n-images", "64", "--image-size", "48", "--seed", "7"]));
        assert_eq!(v["images"], 64);
    }
    let files: Vec<_> = std::fs::read_dir(a.join("images")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 64);
    for f in files {
        assert_eq!(std::fs::read(a.join("images").join(&f)).unwrap(), std::fs::read(b.join("images").join(&f)).unwrap());
    }
    let ma = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    let mb = std::fs::read_to_string(b.join("manifest.json")).unwrap();
    assert_eq!(ma.replace(s(&a), ""), mb.replace(s(&b), ""));
}

#[test]
fn classify_profile_keeps_the_imbalance_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cls");
    let v = ok_json(lassr(&["synth-data", "--out", s(&out), "--profile", "classify", "--divisor", "1000", "--image-size", "32"]));
    let train = &v["splits"]["train"];
    assert_eq!(train["Healthy"], 13);
    assert_eq!(train["Downy mildew"], 3);
    assert_eq!(v["splits"]["test"]["Brown spot"], 3);
}

#[test]
fn unknown_keys_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 2}, "arm": {"sigma": 1.0}, "extra": true}"#).unwrap();
    let e = err_json(lassr(&["--config", s(&cfg), "fid", "--a", ".", "--b", "."]));
    assert_eq!(e["error"], "invalid_config");
    let problems: Vec<String> = serde_json::from_value(e["problems"].clone()).unwrap();
    for key in ["train.epochz", "arm.sigma", "extra"] {
        assert!(problems.iter().any(|p| p.starts_with(key)), "{key} not in {problems:?}");
    }
}

#[test]
fn invalid_values_are_reported_per_section() {
    let e = err_json(lassr(&["--set", "arm.sigma1_ratio=0.5", "--set", "classify.cb_beta=1.5", "fid", "--a", ".", "--b", "."]));
    let problems = e["problems"].as_array().unwrap();
    assert!(problems.iter().any(|p| p.as_str().unwrap().starts_with("arm:")));
    assert!(problems.iter().any(|p| p.as_str().unwrap().starts_with("classify:")));
}

#[test]
fn config_comes_from_the_environment_when_no_flag_is_given() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("env.toml");
    std::fs::write(&cfg, "[train]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lassr"))
        .args(["fid", "--a", ".", "--b", "."])
        .env("LASSR_CONFIG", &cfg)
        .output()
        .unwrap();
    let e = err_json(out);
    assert_eq!(e["problems"][0], "train.bogus: unknown key");
}

#[test]
fn train_two_epochs_then_sr_audit_fid_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let corpus = synth(tmp.path(), 64, 0.0);
    let run = tmp.path().join("run");
    let v = ok_json(lassr(&[
        "--config", s(&cfg), "train", "--manifest", s(&corpus.join("manifest.json")), "--out", s(&run), "--epochs", "2",
    ]));
    assert_eq!(v["steps"], 4);
    let log = std::fs::read_to_string(run.join("log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(run.join("loss_curve.png").is_file());
    let ckpt = v["checkpoint"].as_str().unwrap().to_string();

    let lr_dir = tmp.path().join("lr");
    std::fs::create_dir_all(&lr_dir).unwrap();
    let lr = lassr_core::Image::from_fn(128, 128, 3, |y, x, c| ((x * 3 + y * 5 + c * 7) % 97) as f64 / 96.0);
    lr.save_png(lr_dir.join("leaf.png")).unwrap();
    let sr_dir = tmp.path().join("sr");
    let v = ok_json(lassr(&["--config", s(&cfg), "sr", "--checkpoint", &ckpt, "--input", s(&lr_dir), "--out", s(&sr_dir)]));
    assert_eq!(v["outputs"][0]["sr_size"], serde_json::json!([512, 512]));
    let sr = lassr_core::Image::load_png(sr_dir.join("leaf.png")).unwrap();
    assert_eq!(sr.dims(), (512, 512, 3));

    let images = corpus.join("images");
    let report = tmp.path().join("audit.json");
    let v = ok_json(lassr(&["audit", "--sr", s(&images), "--hr", s(&images), "--out", s(&report)]));
    assert_eq!(v["artifact_rate"], 0.0);
    assert_eq!(v["flagged"], 0);
    assert!(report.is_file());

    let v = ok_json(lassr(&["fid", "--a", s(&images), "--b", s(&images), "--out", s(&tmp.path().join("fid.json"))]));
    assert!(v["fid"].as_f64().unwrap().abs() < 1e-9);

    let plot = tmp.path().join("profile.png");
    let a = images.join("00000.png");
    let b = images.join("00001.png");
    let v = ok_json(lassr(&["profile", "--images", s(&a), s(&b), "--row", "10", "--out", s(&plot)]));
    assert_eq!(v["row"], 10);
    assert!(plot.is_file() && plot.with_extension("json").is_file());
}

#[test]
fn resumed_training_continues_the_same_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let corpus = synth(tmp.path(), 64, 0.0);
    let manifest = corpus.join("manifest.json");
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    ok_json(lassr(&["--config", s(&cfg), "train", "--manifest", s(&manifest), "--out", s(&full), "--epochs", "2"]));
    ok_json(lassr(&["--config", s(&cfg), "train", "--manifest", s(&manifest), "--out", s(&part), "--epochs", "2", "--max-steps", "2"]));
    let v = ok_json(lassr(&["--config", s(&cfg), "train", "--manifest", s(&manifest), "--out", s(&part), "--epochs", "2", "--resume"]));
    assert_eq!(v["resumed_from"], 2);
    let strip = |text: String| -> Vec<Value> {
        text.lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let a = strip(std::fs::read_to_string(full.join("log.ndjson")).unwrap());
    let b = strip(std::fs::read_to_string(part.join("log.ndjson")).unwrap());
    assert_eq!(a, b);
}

#[test]
fn classify_runs_the_requested_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cls");
    ok_json(lassr(&["synth-data", "--out", s(&data), "--profile", "classify", "--divisor", "1000", "--image-size", "32"]));
    let out = tmp.path().join("out");
    let v = ok_json(lassr(&[
        "--set", "classify.input_size=32", "--set", "classify.epochs=1", "--set", "classify.channels=[4,4,4]",
        "classify", "--manifest", s(&data.join("manifest.json")), "--variants", "lr,bicubic,hr", "--out", s(&out),
    ]));
    assert_eq!(v["micro"].as_object().unwrap().len(), 3);
    assert!(out.join("results.json").is_file() && out.join("accuracy.png").is_file());

    let e = err_json(lassr(&["--set", "classify.input_size=32", "classify", "--manifest", s(&data.join("manifest.json")), "--variants", "lassr"]));
    assert_eq!(e["error"], "usage");
}

#[test]
fn missing_inputs_fail_with_error_json() {
    let e = err_json(lassr(&["sr", "--checkpoint", "/nonexistent.ckpt", "--input", "x.png", "--out", "/tmp/never"]));
    assert_eq!(e["error"], "io");
}
