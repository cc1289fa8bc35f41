//! CLI behavior through the real binary: exit codes, run-directory
//! artifacts, lock files and config override handling.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radenc"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("radenc-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_pretrain_config(dir: &Path) -> PathBuf {
    let path = dir.join("pretrain.json");
    std::fs::write(
        &path,
        r#"{
            "student_architecture": "vit_tiny",
            "batch_size_per_gpu": 4,
            "epochs": 2,
            "global_crop_size": 56,
            "dino_ibot_prototypes": 32,
            "dino_ibot_head_hidden_dim": 32,
            "dino_ibot_bottleneck_dim": 16,
            "layer_scale": 1.0,
            "teacher_momentum_start": 0.5,
            "base_learning_rate": 0.003,
            "seed": 7,
            "data": "synth:blobs:8:64"
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("definitely-not-a-subcommand").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_3() {
    let dir = tmp_dir("badkey");
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{"data": "synth:blobs:8:64", "surprise_key": 1}"#).unwrap();
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&path)
        .args(["--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("surprise_key"), "{msg}");
}

#[test]
fn missing_data_file_exits_4() {
    let dir = tmp_dir("missingdata");
    let path = dir.join("p.json");
    std::fs::write(
        &path,
        r#"{"data": "no/such/manifest.json", "epochs": 1, "global_crop_size": 56,
            "student_architecture": "vit_tiny"}"#,
    )
    .unwrap();
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_run_dir_is_complete_and_deterministic() {
    let dir = tmp_dir("determinism");
    let config = write_pretrain_config(&dir);
    for run in ["run1", "run2"] {
        let out = bin()
            .args(["pretrain", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["loss.csv", "checkpoint.ckpt", "teacher.ckpt", "resolved_config.json"] {
        assert!(dir.join("run1").join(name).exists(), "missing {name}");
    }
    let a = std::fs::read(dir.join("run1/loss.csv")).unwrap();
    let b = std::fs::read(dir.join("run2/loss.csv")).unwrap();
    assert_eq!(a, b, "same seed and config must give identical CSV bytes");
    // The lock file is cleaned up after a successful run.
    assert!(!dir.join("run1/.radenc.lock").exists());
}

#[test]
fn seed_override_changes_the_trace() {
    let dir = tmp_dir("seedover");
    let config = write_pretrain_config(&dir);
    for (run, seed) in [("a", "7"), ("b", "8")] {
        let out = bin()
            .args(["pretrain", "--config"])
            .arg(&config)
            .args(["--seed", seed, "--out"])
            .arg(dir.join(run))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.join("a/loss.csv")).unwrap();
    let b = std::fs::read(dir.join("b/loss.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn locked_run_dir_is_rejected() {
    let dir = tmp_dir("locked");
    let config = write_pretrain_config(&dir);
    let run = dir.join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".radenc.lock"), "held").unwrap();
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn lora_flags_are_recorded_in_resolved_config() {
    let dir = tmp_dir("loraflags");
    let path = dir.join("cls.json");
    std::fs::write(
        &path,
        r#"{
            "regime": "head_only", "n_classes": 2, "image_size": 56,
            "batch_size": 8, "epochs": 1, "learning_rate": 0.001,
            "warmup_epochs": 0, "augment": false, "encoder_layer_scale": 1.0,
            "seed": 3, "data": "synth:blobs:12:56"
        }"#,
    )
    .unwrap();
    let out = bin()
        .args(["train-cls", "--config"])
        .arg(&path)
        .args(["--regime", "lora", "--lora-r", "8", "--lora-alpha", "16", "--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(dir.join("run/resolved_config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(v["lora_scaling"], serde_json::json!(2.0));
    assert_eq!(v["regime"], serde_json::json!("lora"));
    assert!(dir.join("run/metrics.csv").exists());
    assert!(dir.join("run/best.ckpt").exists());
}

#[test]
fn eval_identical_seg_dirs_report_perfect_miou() {
    let dir = tmp_dir("evalseg");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&masks).unwrap();
    for i in 0..3 {
        let mask = ndarray::Array2::from_shape_fn((16, 16), |(r, c)| {
            u8::from((4..12).contains(&r) && c >= (i + 2) && c < 14)
        });
        radenc_data::png_io::write_png_gray(&masks.join(format!("{i}.png")), &mask).unwrap();
    }
    let out = bin()
        .args(["eval", "--task", "seg", "--pred"])
        .arg(&masks)
        .arg("--truth")
        .arg(&masks)
        .args(["--n-classes", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["miou"], serde_json::json!(1.0));
    assert_eq!(report["dice"], serde_json::json!(1.0));
}

#[test]
fn plot_renders_csv_and_overlay() {
    let dir = tmp_dir("plot");
    let csv = dir.join("m.csv");
    std::fs::write(&csv, "epoch,acc,f1\n0,0.5,0.4\n1,0.7,0.6\n2,0.9,0.85\n").unwrap();
    let png = dir.join("m.png");
    let out = bin()
        .args(["plot", "--csv"])
        .arg(&csv)
        .arg("--out")
        .arg(&png)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(png.exists());
    assert!(dir.join("m.legend.txt").exists());

    let img = ndarray::Array3::<u8>::from_elem((3, 16, 16), 128);
    radenc_data::png_io::write_png_rgb(&dir.join("img.png"), &img).unwrap();
    let mask = ndarray::Array2::from_shape_fn((16, 16), |(r, _)| u8::from(r > 8));
    radenc_data::png_io::write_png_gray(&dir.join("mask.png"), &mask).unwrap();
    let out = bin()
        .args(["plot", "--image"])
        .arg(dir.join("img.png"))
        .arg("--mask")
        .arg(dir.join("mask.png"))
        .arg("--out")
        .arg(dir.join("overlay.png"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("overlay.png").exists());
}

#[test]
fn warm_start_resizes_pos_embed_across_image_sizes() {
    // Pretrain at crop 56 (grid 4x4), then adapt the checkpoint to a dense
    // run at 224 (grid 16x16): the positional table must be interpolated.
    let dir = tmp_dir("warmstart");
    let config = write_pretrain_config(&dir);
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("pre"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let seg_config = dir.join("seg.json");
    std::fs::write(
        &seg_config,
        format!(
            r#"{{
                "preset": "tiny", "n_classes": 2, "epochs": 1, "batch_size": 4,
                "encoder_layer_scale": 1.0, "seed": 4, "data": "synth:squares:8:224",
                "init_checkpoint": "{}"
            }}"#,
            dir.join("pre/teacher.ckpt").display()
        ),
    )
    .unwrap();
    let out = bin()
        .args(["train-seg", "--config"])
        .arg(&seg_config)
        .arg("--out")
        .arg(dir.join("seg"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("seg/metrics.csv").exists());
}

#[test]
fn embed_writes_one_row_per_image() {
    let dir = tmp_dir("embed");
    let config = write_pretrain_config(&dir);
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("pre"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = bin()
        .args(["embed", "--checkpoint"])
        .arg(dir.join("pre/checkpoint.ckpt"))
        .args(["--data", "synth:blobs:10:56", "--split", "train", "--encoder-layer-scale", "1.0", "--out"])
        .arg(dir.join("emb.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("emb.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // 10 images -> train split has 6 (60%), plus header.
    assert_eq!(lines.len(), 7, "{}", lines.len());
    assert!(lines[0].starts_with("index,label,e0"));
}
