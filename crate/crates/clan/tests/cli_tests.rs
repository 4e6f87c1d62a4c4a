//! End-to-end checks of the binary: exit codes, determinism, file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_clan")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should run")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn tiny_cfg_body(out_dir: &Path, extra: &str) -> String {
    format!(
        "model.stage_channels = 6,8\n\
         model.stage_blocks = 1,1\n\
         model.input_size = 16\n\
         model.tap_stages = 1\n\
         data.image_size = 16\n\
         data.num_classes = 3\n\
         data.patch_size = 3\n\
         data.base_shapes = 2\n\
         data.train_per_class = 8\n\
         data.test_per_class = 4\n\
         optim.epochs = 2\n\
         optim.batch = 8\n\
         seed = 11\n\
         precision = f64\n\
         output_dir = {}\n\
         {extra}",
        out_dir.display()
    )
}

#[test]
fn train_then_eval_then_viz_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(tmp.path(), "run.cfg", &tiny_cfg_body(&out, ""));

    let train = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let stdout = String::from_utf8_lossy(&train.stdout);
    // machine-parseable key=value metric lines
    assert!(stdout.lines().all(|l| l.starts_with("epoch=")));
    assert!(out.join("train_log.csv").exists());
    assert!(out.join("checkpoint.bin").exists());

    let ckpt = out.join("checkpoint.bin");
    let eval = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(eval.status.success());
    let eval_out = String::from_utf8_lossy(&eval.stdout);
    assert!(eval_out.lines().all(|l| l.starts_with("subset=")));
    // standard ladder: singletons + G+P + G+P+A + all
    assert_eq!(eval_out.lines().count(), 3 + 3);

    let explicit = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--branches",
        "G,A1",
    ]);
    assert!(explicit.status.success());
    assert!(String::from_utf8_lossy(&explicit.stdout).starts_with("subset=G+A1"));

    let viz = run(&[
        "viz",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sample",
        "0",
    ]);
    assert!(viz.status.success(), "{}", String::from_utf8_lossy(&viz.stderr));
    assert!(out.join("sample0_input.ppm").exists());
    assert!(out.join("sample0_s1_attention.ppm").exists());
    assert!(out.join("sample0_s1_overlay.ppm").exists());
}

#[test]
fn two_identical_runs_are_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg_a = write_cfg(tmp.path(), "a.cfg", &tiny_cfg_body(&out_a, ""));
    let cfg_b = write_cfg(tmp.path(), "b.cfg", &tiny_cfg_body(&out_b, ""));
    assert!(run(&["train", "--config", cfg_a.to_str().unwrap()]).status.success());
    assert!(run(&["train", "--config", cfg_b.to_str().unwrap()]).status.success());
    let csv_a = std::fs::read(out_a.join("train_log.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("train_log.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let ck_a = std::fs::read(out_a.join("checkpoint.bin")).unwrap();
    let ck_b = std::fs::read(out_b.join("checkpoint.bin")).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn zero_learning_rate_training_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(
        tmp.path(),
        "run.cfg",
        &tiny_cfg_body(&out, "optim.lr = 0\noptim.epochs = 1\n"),
    );
    assert!(run(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    // final weights equal a freshly initialized model's
    let cfg_parsed = clan::config::RunConfig::from_file(&cfg).unwrap();
    let fresh = clan::model::ClanModel::<f64>::new(cfg_parsed.model.clone(), cfg_parsed.seed).unwrap();
    let trained = clan::model::ClanModel::<f64>::new(cfg_parsed.model, cfg_parsed.seed).unwrap();
    trained.load(&out.join("checkpoint.bin")).unwrap();
    for ((_, a), (_, b)) in fresh.state_tensors().iter().zip(trained.state_tensors().iter()) {
        assert!(a
            .data()
            .iter()
            .zip(b.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn invalid_config_exits_2_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "bad.cfg", "seed = 1\nnonsense.key = 5\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":2:"), "stderr: {err}");
}

#[test]
fn missing_config_exits_2() {
    let out = run(&["train", "--config", "/nonexistent/nope.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn viz_sample_out_of_range_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(tmp.path(), "run.cfg", &tiny_cfg_body(&out, ""));
    assert!(run(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let ckpt = out.join("checkpoint.bin");
    let viz = run(&[
        "viz",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sample",
        "9999",
    ]);
    assert_eq!(viz.status.code(), Some(2));
}

#[test]
fn eval_with_incompatible_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(tmp.path(), "run.cfg", &tiny_cfg_body(&out, ""));
    assert!(run(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    // different channel widths cannot load the checkpoint
    let out2 = tmp.path().join("run2");
    let cfg2 = write_cfg(
        tmp.path(),
        "other.cfg",
        &tiny_cfg_body(&out2, "model.stage_channels = 8,12\n"),
    );
    let eval = run(&[
        "eval",
        "--config",
        cfg2.to_str().unwrap(),
        "--checkpoint",
        out.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(2));
}

#[test]
fn gradcheck_requires_f64() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(tmp.path(), "run.cfg", &tiny_cfg_body(&out, "precision = f32\n"));
    let check = run(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(2));
}

#[test]
fn precision_env_var_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    // config says f32; the env var forces f64, letting gradcheck proceed
    let cfg = write_cfg(tmp.path(), "run.cfg", &tiny_cfg_body(&out, "precision = f32\n"));
    let check = Command::new(bin())
        .args(["gradcheck", "--config", cfg.to_str().unwrap()])
        .env("CLAN_PRECISION", "f64")
        .output()
        .unwrap();
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
    let stdout = String::from_utf8_lossy(&check.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("check=")));
    assert!(stdout.contains("status=pass"));
}

#[test]
fn viz_outputs_decode_within_quantization_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(tmp.path(), "run.cfg", &tiny_cfg_body(&out, ""));
    assert!(run(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    assert!(run(&[
        "viz",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out.join("checkpoint.bin").to_str().unwrap(),
        "--sample",
        "1",
    ])
    .status
    .success());

    // the exported input must decode back to the generated sample
    let cfg_parsed = clan::config::RunConfig::from_file(&cfg).unwrap();
    let test_set: Vec<clan::data::Sample<f64>> =
        clan::data::synth_generate(&cfg_parsed.data, clan::data::Split::Test).unwrap();
    let decoded: clan::tensor::Tensor<f64> =
        clan::data::ppm::read_image_ppm(&out.join("sample1_input.ppm")).unwrap();
    let original = test_set[1].image.data_vec();
    for (a, b) in decoded.data().iter().zip(&original) {
        assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
    }
}
