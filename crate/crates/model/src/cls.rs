//! Classification adaptation under three regimes: full fine-tuning,
//! head-only with a frozen backbone, and LoRA on the attention query/value
//! projections. The classifier reads the class token after the terminal norm.

use ndarray::{Array2, IxDyn};
use radenc_core::error::{Error, Result};
use radenc_core::image::{hflip_image, random_resized_crop, rotate_image};
use radenc_core::ops;
use radenc_core::optim::{clip_global_norm, AdamW};
use radenc_core::tensor::{Arr, Bindings, Tensor};
use radenc_core::{ImageBatch, ParameterStore, Rng};
use radenc_data::{epoch_order, ClsDataset, ClsSplit};
use radenc_metrics::{accuracy, auc_ovr, macro_f1};
use serde::{Deserialize, Serialize};

use crate::encoder::{register as register_encoder, Encoder, EncoderConfig};
use crate::fwd::Fwd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Full,
    HeadOnly,
    Lora,
}

fn d_image() -> usize {
    224
}
fn d_batch() -> usize {
    128
}
fn d_epochs() -> usize {
    40
}
fn d_lr() -> f64 {
    1e-5
}
fn d_wd() -> f64 {
    0.01
}
fn d_warmup() -> usize {
    10
}
fn d_clip() -> f64 {
    1.0
}
fn d_r() -> usize {
    8
}
fn d_alpha() -> f64 {
    16.0
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsConfig {
    pub regime: Regime,
    pub n_classes: usize,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_r")]
    pub lora_r: usize,
    #[serde(default = "d_alpha")]
    pub lora_alpha: f64,
    #[serde(default = "d_true")]
    pub augment: bool,
    #[serde(default)]
    pub early_stop_val_acc: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ClsConfig {
    pub fn new(regime: Regime, n_classes: usize) -> Self {
        serde_json::from_value(serde_json::json!({
            "regime": regime,
            "n_classes": n_classes,
        }))
        .expect("defaults")
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be >= 2"));
        }
        if self.regime == Regime::Lora && self.lora_r == 0 {
            return Err(Error::domain("lora_r must be > 0"));
        }
        Ok(())
    }
}

/// Class token after the terminal norm, `[B, D]`.
pub fn extract_embedding(
    store: &ParameterStore,
    enc_cfg: &EncoderConfig,
    image: &ImageBatch,
) -> Result<Arr> {
    let bind = Bindings::eval(store);
    let fwd = Fwd::eval(&bind);
    let enc = Encoder::new(&fwd, enc_cfg, "encoder");
    let tokens = enc.forward(image)?;
    Ok(tokens.cls().value().clone())
}

/// Freeze every weight matching `patterns` and install rank-`r` adapters:
/// `A` random (std 0.02), `B` zero, scale alpha/r, so the wrapped map equals
/// the base map exactly until the first update. Returns the match count.
pub fn lora_wrap(
    store: &mut ParameterStore,
    patterns: &[String],
    r: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<usize> {
    if r == 0 {
        return Err(Error::domain("LoRA rank must be > 0"));
    }
    let mut matches: Vec<String> = Vec::new();
    for pat in patterns {
        for path in store.matching_paths(pat) {
            if !matches.contains(&path) {
                matches.push(path);
            }
        }
    }
    matches.sort();
    if matches.is_empty() {
        return Err(Error::config(format!(
            "LoRA target patterns {:?} matched no parameters",
            patterns
        )));
    }
    for path in &matches {
        let shape = store.value(path)?.shape().to_vec();
        if shape.len() != 2 || !path.ends_with(".weight") {
            return Err(Error::config(format!(
                "LoRA target `{path}` is not a linear weight"
            )));
        }
        let (out_dim, in_dim) = (shape[0], shape[1]);
        let base = path.trim_end_matches(".weight");
        store.set_frozen(path, true)?;
        let a = Arr::from_shape_fn(IxDyn(&[r, in_dim]), |_| rng.normal() * 0.02);
        store.insert(&format!("{base}.lora_a"), a)?;
        store.insert_zeros(&format!("{base}.lora_b"), &[out_dim, r])?;
        store.insert_buffer(
            &format!("{base}.lora_scale"),
            Arr::from_elem(IxDyn(&[1]), alpha / r as f64),
        )?;
    }
    Ok(matches.len())
}

pub const LORA_DEFAULT_TARGETS: [&str; 2] = [
    "encoder.blocks.*.attn.q.weight",
    "encoder.blocks.*.attn.v.weight",
];

/// Register the linear head and apply the regime's freeze/wrap policy to a
/// store that already holds `encoder.*`.
pub fn prepare_store(
    store: &mut ParameterStore,
    enc_cfg: &EncoderConfig,
    cfg: &ClsConfig,
    rng: &mut Rng,
) -> Result<()> {
    let d = enc_cfg.embed_dim;
    store.insert(
        "head.weight",
        Arr::from_shape_fn(IxDyn(&[cfg.n_classes, d]), |_| rng.trunc_normal(0.02)),
    )?;
    store.insert_zeros("head.bias", &[cfg.n_classes])?;
    match cfg.regime {
        Regime::Full => {}
        Regime::HeadOnly => {
            store.freeze_prefix("encoder.");
        }
        Regime::Lora => {
            store.freeze_prefix("encoder.");
            let patterns: Vec<String> = LORA_DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect();
            lora_wrap(store, &patterns, cfg.lora_r, cfg.lora_alpha, rng)?;
        }
    }
    Ok(())
}

fn forward_logits(fwd: &Fwd, enc_cfg: &EncoderConfig, image: &ImageBatch) -> Result<Tensor> {
    let enc = Encoder::new(fwd, enc_cfg, "encoder");
    let tokens = enc.forward(image)?;
    let w = fwd.get("head.weight");
    let b = fwd.get("head.bias");
    Ok(ops::linear(&tokens.cls(), &w, Some(&b)))
}

/// Class probabilities and argmax predictions for a list of images.
pub fn predict(
    store: &ParameterStore,
    enc_cfg: &EncoderConfig,
    images: &[Arr],
    batch_size: usize,
) -> Result<(Vec<usize>, Array2<f64>)> {
    let bind = Bindings::eval(store);
    let fwd = Fwd::eval(&bind);
    let n_classes = store.value("head.bias")?.len();
    let mut preds = Vec::with_capacity(images.len());
    let mut scores = Array2::zeros((images.len(), n_classes));
    for (start, chunk) in images.chunks(batch_size.max(1)).enumerate().map(|(i, c)| (i * batch_size.max(1), c)) {
        let batch = ImageBatch::from_images(chunk)?;
        let logits = forward_logits(&fwd, enc_cfg, &batch)?;
        let probs = ops::softmax(&logits, 1);
        let pv = probs.value();
        for i in 0..chunk.len() {
            let row = pv.slice(ndarray::s![i, ..]);
            let mut best = 0;
            for c in 1..n_classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            preds.push(best);
            for c in 0..n_classes {
                scores[(start + i, c)] = row[c];
            }
        }
    }
    Ok((preds, scores))
}

fn augment_image(img: &Arr, size: usize, rng: &mut Rng) -> Arr {
    let mut out = random_resized_crop(img, size, (0.64, 1.0), (0.75, 4.0 / 3.0), rng);
    if rng.bernoulli(0.5) {
        out = hflip_image(&out);
    }
    let deg = rng.uniform(-15.0, 15.0);
    out = rotate_image(&out, deg);
    out
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,split,acc,f1,auc"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.split, self.acc, self.f1, self.auc
        )
    }
}

#[derive(Debug)]
pub struct ClsRun {
    /// Final parameters after the last epoch.
    pub store: ParameterStore,
    /// Snapshot at the best validation macro-F1.
    pub best_store: ParameterStore,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Largest post-clip global gradient norm seen during training.
    pub max_post_clip_norm: f64,
    pub final_train_loss: f64,
}

pub fn eval_split(
    store: &ParameterStore,
    enc_cfg: &EncoderConfig,
    split: &ClsSplit,
    n_classes: usize,
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    let (preds, scores) = predict(store, enc_cfg, &split.images, batch_size)?;
    let acc = accuracy(&split.labels, &preds).map_err(|e| Error::data(e.to_string()))?;
    let f1 =
        macro_f1(&split.labels, &preds, n_classes).map_err(|e| Error::data(e.to_string()))?;
    let auc = match auc_ovr(&split.labels, scores.view()) {
        Ok(a) => a.value,
        Err(_) => f64::NAN, // degenerate split: every class one-sided
    };
    Ok((acc, f1, auc))
}

/// Supervised cross-entropy training per the configured regime. Returns the
/// best-validation-F1 snapshot alongside the final parameters.
pub fn train_classifier(dataset: &ClsDataset, cfg: &ClsConfig, enc_cfg: &EncoderConfig) -> Result<ClsRun> {
    cfg.validate()?;
    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParameterStore::new();
    register_encoder(&mut store, enc_cfg, "encoder", &mut rng)?;
    prepare_store(&mut store, enc_cfg, cfg, &mut rng)?;
    train_classifier_with(store, dataset, cfg, enc_cfg, &mut rng)
}

/// Same, but on a caller-provided store (e.g. a pretrained encoder) that has
/// already been through `prepare_store`.
pub fn train_classifier_with(
    mut store: ParameterStore,
    dataset: &ClsDataset,
    cfg: &ClsConfig,
    enc_cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<ClsRun> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::data("classification dataset has an empty split"));
    }
    let mut opt = AdamW::new();
    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch_size.max(1)).max(1);
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let mut global_step = 0u64;
    let mut history = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_store = store.clone();
    let mut max_post_clip = 0.0f64;
    let mut final_train_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.train.len(), cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = &dataset.train.images[i];
                let img = if cfg.augment {
                    augment_image(img, cfg.image_size, rng)
                } else {
                    img.clone()
                };
                images.push(img);
                labels.push(dataset.train.labels[i]);
            }
            let batch = ImageBatch::from_images(&images)?;

            let bind = Bindings::train(&store);
            let loss_val;
            {
                // Stochastic depth only applies when the encoder itself trains.
                let fwd_train;
                let fwd_eval;
                let fwd: &Fwd = if cfg.regime == Regime::Full {
                    fwd_train = Fwd::train(&bind, rng);
                    &fwd_train
                } else {
                    fwd_eval = Fwd::eval(&bind);
                    &fwd_eval
                };
                let logits = forward_logits(fwd, enc_cfg, &batch)?;
                let logp = ops::log_softmax(&logits, 1);
                let nll = ops::nll_sum(&logp, &labels, None);
                let loss = ops::scale(&nll, 1.0 / labels.len() as f64);
                loss_val = loss.item();
                if !loss_val.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite classification loss at step {global_step}"
                    )));
                }
                loss.backward();
            }
            let mut grads = bind.grads();
            let post = clip_global_norm(&mut grads, cfg.grad_clip);
            max_post_clip = max_post_clip.max(post);
            let lr = if (global_step as f64) < warmup_steps && warmup_steps > 0.0 {
                cfg.learning_rate * global_step as f64 / warmup_steps
            } else {
                cfg.learning_rate
            };
            opt.step(&mut store, &grads, lr, cfg.weight_decay)?;
            global_step += 1;
            epoch_loss += loss_val * labels.len() as f64;
            epoch_items += labels.len();
        }
        final_train_loss = epoch_loss / epoch_items as f64;

        let (acc, f1, auc) = eval_split(&store, enc_cfg, &dataset.val, dataset.n_classes, cfg.batch_size)?;
        history.push(EpochMetrics {
            epoch,
            split: "val".into(),
            acc,
            f1,
            auc,
        });
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = epoch;
            best_store = store.clone();
        }
        if let Some(target) = cfg.early_stop_val_acc {
            if acc >= target {
                break;
            }
        }
    }
    store.set_step(global_step);
    Ok(ClsRun {
        store,
        best_store,
        best_epoch,
        history,
        max_post_clip_norm: max_post_clip,
        final_train_loss,
    })
}
