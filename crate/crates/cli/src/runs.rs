//! Training/embedding run orchestration: run directories with lock files,
//! resolved-config snapshots, dataset resolution (manifest or synthetic),
//! and the per-task training drivers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use radenc_core::checkpoint::{fnv1a64, load_checkpoint, save_checkpoint};
use radenc_core::error::{Error, Result};
use radenc_core::{ParameterStore, Rng};
use radenc_data::manifest::load_dataset;
use radenc_data::synth::{synth_blobs, synth_shapes_captions, synth_squares};
use radenc_data::Dataset;
use radenc_model::caption::{CapConfig, Captioner};
use radenc_model::cls::{prepare_store, train_classifier_with, ClsConfig, EpochMetrics, Regime};
use radenc_model::dense::{register_dense, train_segmenter_with, DenseConfig, SegEpoch};
use radenc_model::encoder::{register as register_encoder, EncoderConfig};
use radenc_model::ssl::{Pretrainer, PretrainConfig, StepLosses};
use serde_json::Value;

use crate::config::{canonical_json, into_typed, take_string};

/// Run directory with an exclusive lock; the lock is removed on drop.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn create(path: PathBuf) -> Result<RunDir> {
        std::fs::create_dir_all(&path)?;
        let lock = path.join(".radenc.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::config(format!(
                    "run directory `{}` is locked by another process (remove {} if stale)",
                    path.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(RunDir { path, lock })
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.path.join(name), text)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

pub fn resolve_out_dir(out: Option<PathBuf>, subcommand: &str, seed: u64) -> Result<PathBuf> {
    if let Some(out) = out {
        return Ok(out);
    }
    if let Ok(root) = std::env::var("RADENC_OUT_ROOT") {
        return Ok(PathBuf::from(root).join(format!("{subcommand}-seed{seed}")));
    }
    Err(Error::config(
        "no output directory: pass --out or set RADENC_OUT_ROOT",
    ))
}

/// Resolve a `data` spec: a manifest path, or `synth:<kind>:<n>[:<size>]`.
pub fn resolve_dataset(spec: &str, config_dir: &Path, seed: u64) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let kind = parts.first().copied().unwrap_or("");
        let n: usize = parts
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::config(format!("synth spec `{spec}` needs a count")))?;
        let size: Option<usize> = parts.get(2).and_then(|s| s.parse().ok());
        return Ok(match kind {
            "blobs" => Dataset::Cls(synth_blobs(n, 2, size.unwrap_or(56), seed)),
            "squares" => Dataset::Seg(synth_squares(n, size.unwrap_or(224), seed)),
            "shapes" => Dataset::Cap(synth_shapes_captions(n, size.unwrap_or(56), seed)),
            other => {
                return Err(Error::config(format!(
                    "unknown synthetic dataset `{other}` (blobs|squares|shapes)"
                )))
            }
        });
    }
    let path = if Path::new(spec).is_absolute() {
        PathBuf::from(spec)
    } else {
        config_dir.join(spec)
    };
    load_dataset(&path)
}

/// Encoder configuration from an `arch` name plus optional overrides.
pub fn encoder_for(
    arch: &str,
    image_size: usize,
    layer_scale: Option<f64>,
    drop_path: Option<f64>,
) -> Result<EncoderConfig> {
    let base = match arch {
        "vit_tiny" => EncoderConfig::tiny(),
        "vit_small" => EncoderConfig::small(),
        "vit_base" => EncoderConfig::base(),
        other => return Err(Error::config(format!("unknown arch `{other}`"))),
    };
    if !image_size.is_multiple_of(base.patch_size) {
        return Err(Error::config(format!(
            "image size {image_size} not a multiple of patch size {}",
            base.patch_size
        )));
    }
    let grid = image_size / base.patch_size;
    Ok(EncoderConfig {
        pos_grid: (grid, grid),
        layer_scale_init: layer_scale.unwrap_or(base.layer_scale_init),
        drop_path_rate: drop_path.unwrap_or(base.drop_path_rate),
        ..base
    })
}

fn take_f64(map: &mut BTreeMap<String, Value>, key: &str) -> Result<Option<f64>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::config(format!("`{key}` must be a number"))),
    }
}

fn snapshot(run: &RunDir, map: &BTreeMap<String, Value>) -> Result<String> {
    let json = canonical_json(map);
    run.write_text("resolved_config.json", &json)?;
    Ok(format!("{:016x}", fnv1a64(json.as_bytes())))
}

/// Warm-start helper: copy `encoder.*` values from a checkpoint into a
/// freshly registered store. Positional embeddings stored at a different
/// grid are bilinearly resized onto the target grid (class position kept).
fn warm_start_encoder(store: &mut ParameterStore, checkpoint: &Path) -> Result<()> {
    let loaded = load_checkpoint(checkpoint, None)?;
    let mut copied = 0;
    for (path, entry) in loaded.store.iter() {
        if !path.starts_with("encoder.") || !store.contains(path) {
            continue;
        }
        let target_shape = store.value(path)?.shape().to_vec();
        let value = if path.ends_with(".pos_embed") && entry.value.shape() != &target_shape[..] {
            resize_pos_embed(&entry.value, &target_shape)?
        } else {
            entry.value.clone()
        };
        store.set_value(path, value)?;
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::config(format!(
            "checkpoint `{}` holds no encoder weights",
            checkpoint.display()
        )));
    }
    Ok(())
}

/// `[1, 1+N_src, D] -> [1, 1+N_dst, D]` for square grids: the patch part is
/// rearranged to a map, bilinearly resized and flattened back.
fn resize_pos_embed(
    src: &radenc_core::tensor::Arr,
    target_shape: &[usize],
) -> Result<radenc_core::tensor::Arr> {
    use radenc_core::ops::bilinear_resize_raw;
    let d = src.shape()[2];
    if target_shape.len() != 3 || target_shape[2] != d {
        return Err(Error::config("positional embedding width mismatch"));
    }
    let n_src = src.shape()[1] - 1;
    let n_dst = target_shape[1] - 1;
    let g_src = (n_src as f64).sqrt().round() as usize;
    let g_dst = (n_dst as f64).sqrt().round() as usize;
    if g_src * g_src != n_src || g_dst * g_dst != n_dst {
        return Err(Error::config(
            "positional embedding resize requires square grids",
        ));
    }
    let cls = src.slice(ndarray::s![.., 0..1, ..]).to_owned();
    let patches = src.slice(ndarray::s![.., 1.., ..]); // [1, N, D]
    let map = patches
        .to_owned()
        .into_shape_with_order((1, g_src, g_src, d))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn();
    let resized = bilinear_resize_raw(&map, g_dst, g_dst);
    let back = resized
        .into_shape_with_order((1, d, g_dst * g_dst))
        .unwrap()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .to_owned();
    let out = ndarray::concatenate(ndarray::Axis(1), &[cls.view().into_dyn(), back.view().into_dyn()])
        .unwrap()
        .as_standard_layout()
        .to_owned();
    Ok(out.into_dyn())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn run_pretrain(
    mut map: BTreeMap<String, Value>,
    config_dir: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if let Some(seed) = seed {
        map.insert("seed".into(), Value::from(seed));
    }
    let data_spec = take_string(&mut map, "data")
        .ok_or_else(|| Error::config("pretrain config needs a `data` entry"))?;
    let resolved_map = {
        let mut m = map.clone();
        m.insert("data".into(), Value::from(data_spec.clone()));
        m
    };
    let cfg: PretrainConfig = into_typed(map)?;
    cfg.validate()?;
    let seed = cfg.seed;

    let run = RunDir::create(resolve_out_dir(out, "pretrain", seed)?)?;
    let digest = snapshot(&run, &resolved_map)?;

    let images = match resolve_dataset(&data_spec, config_dir, seed)? {
        Dataset::Pretrain(ds) => ds.train,
        Dataset::Cls(ds) => ds.train.images,
        Dataset::Seg(ds) => ds.train.images,
        Dataset::Cap(ds) => ds.train.images,
    };
    if images.is_empty() {
        return Err(Error::data("pretraining corpus is empty"));
    }

    let total_steps = Pretrainer::steps_for(&cfg, images.len());
    let epochs = cfg.epochs;
    let mut pre = Pretrainer::new(cfg, total_steps)?;
    let rows = pre.run(&images, epochs)?;

    let mut csv = String::from(StepLosses::csv_header());
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    run.write_text("loss.csv", &csv)?;
    save_checkpoint(
        &pre.student,
        pre.rng.state(),
        &digest,
        &run.path.join("checkpoint.ckpt"),
    )?;
    save_checkpoint(
        &pre.teacher.params,
        pre.rng.state(),
        &digest,
        &run.path.join("teacher.ckpt"),
    )?;
    Ok(run.path.clone())
}

// ---------------------------------------------------------------------------
// train-cls
// ---------------------------------------------------------------------------

pub struct ClsFlags {
    pub regime: Option<String>,
    pub lora_r: Option<usize>,
    pub lora_alpha: Option<f64>,
}

pub fn run_train_cls(
    mut map: BTreeMap<String, Value>,
    config_dir: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    flags: ClsFlags,
) -> Result<PathBuf> {
    if let Some(seed) = seed {
        map.insert("seed".into(), Value::from(seed));
    }
    if let Some(regime) = &flags.regime {
        map.insert("regime".into(), Value::from(regime.clone()));
    }
    if let Some(r) = flags.lora_r {
        map.insert("lora_r".into(), Value::from(r));
    }
    if let Some(a) = flags.lora_alpha {
        map.insert("lora_alpha".into(), Value::from(a));
    }
    let data_spec = take_string(&mut map, "data")
        .ok_or_else(|| Error::config("train-cls config needs a `data` entry"))?;
    let arch = take_string(&mut map, "arch").unwrap_or_else(|| "vit_tiny".into());
    let init_checkpoint = take_string(&mut map, "init_checkpoint");
    let enc_ls = take_f64(&mut map, "encoder_layer_scale")?;
    let enc_dp = take_f64(&mut map, "encoder_drop_path")?;

    let cfg: ClsConfig = into_typed(map.clone())?;
    cfg.validate()?;
    let enc_cfg = encoder_for(&arch, cfg.image_size, enc_ls, enc_dp)?;

    let mut resolved_map = map;
    resolved_map.insert("data".into(), Value::from(data_spec.clone()));
    resolved_map.insert("arch".into(), Value::from(arch));
    if cfg.regime == Regime::Lora {
        resolved_map.insert("lora_scaling".into(), Value::from(cfg.lora_scaling()));
    }
    if let Some(ck) = &init_checkpoint {
        resolved_map.insert("init_checkpoint".into(), Value::from(ck.clone()));
    }

    let run = RunDir::create(resolve_out_dir(out, "train-cls", cfg.seed)?)?;
    let digest = snapshot(&run, &resolved_map)?;

    let Dataset::Cls(dataset) = resolve_dataset(&data_spec, config_dir, cfg.seed)? else {
        return Err(Error::config("train-cls needs a classification dataset"));
    };
    if dataset.n_classes != cfg.n_classes {
        return Err(Error::config(format!(
            "config n_classes {} != dataset n_classes {}",
            cfg.n_classes, dataset.n_classes
        )));
    }

    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParameterStore::new();
    register_encoder(&mut store, &enc_cfg, "encoder", &mut rng)?;
    if let Some(ck) = &init_checkpoint {
        warm_start_encoder(&mut store, &config_dir.join(ck))?;
    }
    prepare_store(&mut store, &enc_cfg, &cfg, &mut rng)?;

    let result = train_classifier_with(store, &dataset, &cfg, &enc_cfg, &mut rng)?;

    let mut csv = String::from(EpochMetrics::csv_header());
    csv.push('\n');
    for row in &result.history {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    run.write_text("metrics.csv", &csv)?;
    save_checkpoint(&result.store, rng.state(), &digest, &run.path.join("final.ckpt"))?;
    save_checkpoint(
        &result.best_store,
        rng.state(),
        &digest,
        &run.path.join("best.ckpt"),
    )?;
    Ok(run.path.clone())
}

// ---------------------------------------------------------------------------
// train-seg
// ---------------------------------------------------------------------------

pub fn run_train_seg(
    mut map: BTreeMap<String, Value>,
    config_dir: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if let Some(seed) = seed {
        map.insert("seed".into(), Value::from(seed));
    }
    let data_spec = take_string(&mut map, "data")
        .ok_or_else(|| Error::config("train-seg config needs a `data` entry"))?;
    let arch = take_string(&mut map, "arch").unwrap_or_else(|| "vit_tiny".into());
    let preset = take_string(&mut map, "preset").unwrap_or_else(|| "tiny".into());
    let init_checkpoint = take_string(&mut map, "init_checkpoint");
    let enc_ls = take_f64(&mut map, "encoder_layer_scale")?;

    let n_classes = map
        .get("n_classes")
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .unwrap_or(2);
    let preset_cfg = match preset.as_str() {
        "tiny" => DenseConfig::tiny_test(n_classes),
        "small" => DenseConfig::small(n_classes),
        "base" => DenseConfig::base(n_classes),
        other => return Err(Error::config(format!("unknown dense preset `{other}`"))),
    };
    // Preset fields overridden by any explicit config keys.
    let mut merged: BTreeMap<String, Value> = match serde_json::to_value(&preset_cfg) {
        Ok(Value::Object(obj)) => obj.into_iter().collect(),
        _ => unreachable!("DenseConfig serializes to an object"),
    };
    merged.extend(map);
    let cfg: DenseConfig = into_typed(merged.clone())?;
    let enc_cfg = encoder_for(&arch, cfg.image_size, enc_ls, None)?;

    let mut resolved_map = merged;
    resolved_map.insert("data".into(), Value::from(data_spec.clone()));
    resolved_map.insert("arch".into(), Value::from(arch));
    resolved_map.insert("preset".into(), Value::from(preset));

    let run = RunDir::create(resolve_out_dir(out, "train-seg", cfg.seed)?)?;
    let digest = snapshot(&run, &resolved_map)?;

    let Dataset::Seg(dataset) = resolve_dataset(&data_spec, config_dir, cfg.seed)? else {
        return Err(Error::config("train-seg needs a segmentation dataset"));
    };

    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParameterStore::new();
    register_encoder(&mut store, &enc_cfg, "encoder", &mut rng)?;
    if let Some(ck) = &init_checkpoint {
        warm_start_encoder(&mut store, &config_dir.join(ck))?;
    }
    store.freeze_prefix("encoder.");
    register_dense(&mut store, &cfg, enc_cfg.embed_dim, &mut rng)?;

    let result = train_segmenter_with(store, &dataset, &cfg, &enc_cfg, &mut rng)?;

    let mut csv = String::from(SegEpoch::csv_header());
    csv.push('\n');
    for row in &result.history {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    run.write_text("metrics.csv", &csv)?;
    save_checkpoint(&result.store, rng.state(), &digest, &run.path.join("final.ckpt"))?;
    save_checkpoint(
        &result.best_store,
        rng.state(),
        &digest,
        &run.path.join("best.ckpt"),
    )?;

    // Export predictions and one overlay per validation image.
    let pred_dir = run.path.join("val_pred");
    std::fs::create_dir_all(&pred_dir)?;
    for (i, img) in dataset.val.images.iter().enumerate() {
        let batch = radenc_core::ImageBatch::from_images(std::slice::from_ref(img))?;
        let masks = radenc_model::dense::predict_mask(&result.best_store, &enc_cfg, &cfg, &batch)?;
        radenc_data::png_io::write_png_gray(&pred_dir.join(format!("{i:04}.png")), &masks[0])?;
    }
    Ok(run.path.clone())
}

// ---------------------------------------------------------------------------
// train-cap
// ---------------------------------------------------------------------------

pub fn run_train_cap(
    mut map: BTreeMap<String, Value>,
    config_dir: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if let Some(seed) = seed {
        map.insert("seed".into(), Value::from(seed));
    }
    let data_spec = take_string(&mut map, "data")
        .ok_or_else(|| Error::config("train-cap config needs a `data` entry"))?;
    let arch = take_string(&mut map, "arch").unwrap_or_else(|| "vit_tiny".into());
    let init_checkpoint = take_string(&mut map, "init_checkpoint");
    let enc_ls = take_f64(&mut map, "encoder_layer_scale")?;

    let cfg: CapConfig = into_typed(map.clone())?;
    cfg.validate()?;
    let enc_cfg = encoder_for(&arch, cfg.image_size, enc_ls, None)?;

    let mut resolved_map = map;
    resolved_map.insert("data".into(), Value::from(data_spec.clone()));
    resolved_map.insert("arch".into(), Value::from(arch));

    let run = RunDir::create(resolve_out_dir(out, "train-cap", cfg.seed)?)?;
    let digest = snapshot(&run, &resolved_map)?;

    let Dataset::Cap(dataset) = resolve_dataset(&data_spec, config_dir, cfg.seed)? else {
        return Err(Error::config("train-cap needs a captioning dataset"));
    };

    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParameterStore::new();
    register_encoder(&mut store, &enc_cfg, "encoder", &mut rng)?;
    if let Some(ck) = &init_checkpoint {
        warm_start_encoder(&mut store, &config_dir.join(ck))?;
    }
    let mut cap = Captioner::with_store(store, cfg, enc_cfg, &dataset, rng)?;
    let history = cap.train(&dataset)?;

    let mut csv = String::from(radenc_model::caption::CapEpoch::csv_header());
    csv.push('\n');
    for row in &history {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    run.write_text("metrics.csv", &csv)?;
    run.write_text("vocab.json", &serde_json::to_string_pretty(&cap.vocab).unwrap())?;
    save_checkpoint(&cap.store, cap.rng.state(), &digest, &run.path.join("final.ckpt"))?;

    // Caption the validation split as JSON lines.
    let mut out_lines = String::new();
    for (i, img) in dataset.val.images.iter().enumerate() {
        let (caption, score) = cap.caption_image_scored(img)?;
        out_lines.push_str(
            &serde_json::json!({"image": format!("val/{i:04}"), "caption": caption, "score": score})
                .to_string(),
        );
        out_lines.push('\n');
    }
    run.write_text("val_captions.jsonl", &out_lines)?;
    Ok(run.path.clone())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn run_embed(
    checkpoint: &Path,
    arch: &str,
    image_size: usize,
    layer_scale: Option<f64>,
    data_spec: &str,
    split: &str,
    out_csv: &Path,
    seed: u64,
) -> Result<()> {
    let enc_cfg = encoder_for(arch, image_size, layer_scale, None)?;
    let loaded = load_checkpoint(checkpoint, None)?;
    let mut store = ParameterStore::new();
    let mut rng = Rng::seed_from(seed);
    register_encoder(&mut store, &enc_cfg, "encoder", &mut rng)?;
    for (path, entry) in loaded.store.iter() {
        if path.starts_with("encoder.") && store.contains(path) {
            store.set_value(path, entry.value.clone())?;
        }
    }

    let ds = resolve_dataset(data_spec, Path::new("."), seed)?;
    let (images, labels): (Vec<_>, Vec<Option<usize>>) = match &ds {
        Dataset::Cls(d) => {
            let split = match split {
                "train" => &d.train,
                "val" => &d.val,
                "test" => &d.test,
                other => return Err(Error::config(format!("unknown split `{other}`"))),
            };
            (
                split.images.clone(),
                split.labels.iter().map(|&l| Some(l)).collect(),
            )
        }
        Dataset::Pretrain(d) => {
            let images = if split == "val" { d.val.clone() } else { d.train.clone() };
            let n = images.len();
            (images, vec![None; n])
        }
        _ => return Err(Error::config("embed expects a classification or pretrain dataset")),
    };
    if images.is_empty() {
        return Err(Error::data(format!("split `{split}` is empty")));
    }

    let mut csv = String::from("index,label");
    let d = enc_cfg.embed_dim;
    for c in 0..d {
        csv.push_str(&format!(",e{c}"));
    }
    csv.push('\n');
    for (i, img) in images.iter().enumerate() {
        let batch = radenc_core::ImageBatch::from_images(std::slice::from_ref(img))?;
        let emb = radenc_model::cls::extract_embedding(&store, &enc_cfg, &batch)?;
        csv.push_str(&i.to_string());
        match labels[i] {
            Some(l) => csv.push_str(&format!(",{l}")),
            None => csv.push(','),
        }
        for c in 0..d {
            csv.push_str(&format!(",{}", emb[[0, c]]));
        }
        csv.push('\n');
    }
    if let Some(parent) = out_csv.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out_csv, csv)?;
    Ok(())
}
