//! Frozen-encoder dense adaptation: a parallel stride-2 conv pyramid over
//! the raw image, token-to-map reshaping of intermediate encoder layers,
//! 1x1-projection + bilinear alignment onto the conv priors, and a two-stage
//! concatenative decoder emitting logits at 1/8 resolution.

use ndarray::{Array2, IxDyn};
use radenc_core::error::{Error, Result};
use radenc_core::ops;
use radenc_core::optim::AdamW;
use radenc_core::tensor::{Arr, Bindings, Tensor};
use radenc_core::{ImageBatch, ParameterStore, Rng};
use radenc_data::{epoch_order, SegDataset};
use radenc_metrics::{SegAccumulator, SegScores};
use serde::{Deserialize, Serialize};

use crate::encoder::{register as register_encoder, Encoder, EncoderConfig, Tokens};
use crate::fwd::{batch_norm_param, Fwd};

fn d_image() -> usize {
    448
}
fn d_epochs() -> usize {
    20
}
fn d_lr() -> f64 {
    1e-4
}
fn d_wd() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    16
}
fn d_bn_momentum() -> f64 {
    0.1
}
fn d_taps() -> Vec<usize> {
    vec![3, 7, 11]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseConfig {
    /// Shared width of the fused maps F8/F16/F32.
    pub d_f: usize,
    /// Channel widths of the five stride-2 pyramid stages.
    pub pyramid: [usize; 5],
    pub n_classes: usize,
    /// Encoder layers tapped for scales 8/16/32, shallow to deep.
    #[serde(default = "d_taps")]
    pub tap_layers: Vec<usize>,
    /// When true, tap indices are given 1-based and shifted down on use.
    #[serde(default)]
    pub tap_one_based: bool,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub early_stop_miou: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl DenseConfig {
    /// Preset paired with the small encoder; pyramid width calibrated so the
    /// trainable total lands on 14.27M.
    pub fn small(n_classes: usize) -> Self {
        DenseConfig {
            d_f: 256,
            pyramid: [64, 128, 707, 707, 707],
            n_classes,
            tap_layers: d_taps(),
            tap_one_based: false,
            image_size: d_image(),
            epochs: d_epochs(),
            learning_rate: d_lr(),
            weight_decay: d_wd(),
            batch_size: d_batch(),
            bn_momentum: d_bn_momentum(),
            early_stop_miou: None,
            seed: 0,
        }
    }

    /// Preset paired with the base encoder, calibrated to 69.76M.
    pub fn base(n_classes: usize) -> Self {
        DenseConfig {
            d_f: 512,
            pyramid: [64, 128, 1664, 1664, 1664],
            ..DenseConfig::small(n_classes)
        }
    }

    pub fn tiny_test(n_classes: usize) -> Self {
        DenseConfig {
            d_f: 32,
            pyramid: [8, 16, 32, 32, 32],
            tap_layers: vec![1, 2, 3],
            image_size: 224,
            learning_rate: 3e-3,
            batch_size: 8,
            ..DenseConfig::small(n_classes)
        }
    }

    pub fn taps(&self) -> Result<Vec<usize>> {
        if self.tap_layers.len() != 3 {
            return Err(Error::config("exactly three tap layers are required"));
        }
        if self.tap_one_based {
            if self.tap_layers.contains(&0) {
                return Err(Error::config("1-based tap index 0 is invalid"));
            }
            Ok(self.tap_layers.iter().map(|&l| l - 1).collect())
        } else {
            Ok(self.tap_layers.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

/// Every adapter tensor with its shape: the single source of truth for both
/// registration and trainable-parameter counting.
pub fn param_spec(cfg: &DenseConfig, encoder_dim: usize) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let mut spec: Vec<(String, Vec<usize>, ParamKind)> = Vec::new();
    let bn = |spec: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, c: usize| {
        spec.push((format!("{prefix}.gamma"), vec![c], BnGamma));
        spec.push((format!("{prefix}.beta"), vec![c], BnBeta));
        spec.push((format!("{prefix}.running_mean"), vec![c], BnMean));
        spec.push((format!("{prefix}.running_var"), vec![c], BnVar));
    };

    let mut in_ch = 3;
    for (i, &out_ch) in cfg.pyramid.iter().enumerate() {
        let p = format!("dense.pyramid.{i}");
        spec.push((format!("{p}.conv.weight"), vec![out_ch, in_ch, 3, 3], ConvWeight));
        spec.push((format!("{p}.conv.bias"), vec![out_ch], Bias));
        bn(&mut spec, &format!("{p}.bn"), out_ch);
        in_ch = out_ch;
    }

    let d = cfg.d_f;
    for (name, prior_ch) in [
        ("s8", cfg.pyramid[2]),
        ("s16", cfg.pyramid[3]),
        ("s32", cfg.pyramid[4]),
    ] {
        let p = format!("dense.fuse.{name}");
        spec.push((format!("{p}.token_proj.weight"), vec![d, encoder_dim, 1, 1], ConvWeight));
        spec.push((format!("{p}.token_proj.bias"), vec![d], Bias));
        spec.push((format!("{p}.prior_proj.weight"), vec![d, prior_ch, 1, 1], ConvWeight));
    }

    for stage in 0..2 {
        let p = format!("dense.decode.{stage}");
        spec.push((format!("{p}.conv1.weight"), vec![d, 2 * d, 3, 3], ConvWeight));
        spec.push((format!("{p}.conv1.bias"), vec![d], Bias));
        bn(&mut spec, &format!("{p}.bn1"), d);
        spec.push((format!("{p}.conv2.weight"), vec![d, d, 3, 3], ConvWeight));
        spec.push((format!("{p}.conv2.bias"), vec![d], Bias));
        bn(&mut spec, &format!("{p}.bn2"), d);
    }

    spec.push(("dense.head.weight".into(), vec![cfg.n_classes, d, 1, 1], ConvWeight));
    spec.push(("dense.head.bias".into(), vec![cfg.n_classes], Bias));
    spec
}

/// Trainable scalar count by shape enumeration (buffers excluded).
pub fn count_trainable(cfg: &DenseConfig, encoder_dim: usize) -> usize {
    param_spec(cfg, encoder_dim)
        .iter()
        .filter(|(_, _, k)| !k.is_buffer())
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

pub fn register_dense(
    store: &mut ParameterStore,
    cfg: &DenseConfig,
    encoder_dim: usize,
    rng: &mut Rng,
) -> Result<()> {
    for (path, shape, kind) in param_spec(cfg, encoder_dim) {
        match kind {
            ParamKind::ConvWeight => {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                store.insert(&path, Arr::from_shape_fn(IxDyn(&shape), |_| rng.normal() * std))?;
            }
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnMean => {
                store.insert_kind(&path, Arr::zeros(IxDyn(&shape)), kind.is_buffer())?;
            }
            ParamKind::BnGamma | ParamKind::BnVar => {
                store.insert_kind(&path, Arr::from_elem(IxDyn(&shape), 1.0), kind.is_buffer())?;
            }
        }
    }
    Ok(())
}

fn conv_bn_relu(fwd: &Fwd, prefix: &str, x: &Tensor, stride: usize, momentum: f64) -> Tensor {
    let w = fwd.get(&format!("{prefix}.conv.weight"));
    let b = fwd.get(&format!("{prefix}.conv.bias"));
    let y = ops::conv2d(x, &w, Some(&b), stride, 1);
    let y = batch_norm_param(fwd, &format!("{prefix}.bn"), &y, momentum);
    ops::relu(&y)
}

/// Stride-2 conv stem and stages tapping features at strides 8, 16, 32.
pub fn conv_pyramid(
    fwd: &Fwd,
    cfg: &DenseConfig,
    image: &ImageBatch,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w) = (image.height(), image.width());
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!(
            "conv_pyramid needs dims divisible by 32, got {h}x{w}"
        )));
    }
    let mut x = Tensor::lit(image.data.clone());
    let mut taps = Vec::with_capacity(3);
    for i in 0..5 {
        x = conv_bn_relu(fwd, &format!("dense.pyramid.{i}"), &x, 2, cfg.bn_momentum);
        if i >= 2 {
            taps.push(x.clone());
        }
    }
    let mut it = taps.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

/// Row-major rearrangement of patch tokens `[B, N, D]` into a spatial map
/// `[B, D, gh, gw]`. A pure permutation: exactly invertible.
pub fn tokens_to_map(tokens: &Tokens) -> Result<Tensor> {
    let (gh, gw) = tokens.grid;
    let n = tokens.num_patches();
    if gh * gw != n {
        return Err(Error::shape(format!("grid {gh}x{gw} != {n} tokens")));
    }
    let (b, d) = (tokens.batch(), tokens.dim());
    let p = tokens.patches();
    Ok(ops::permute(&ops::reshape(&p, &[b, gh, gw, d]), &[0, 3, 1, 2]))
}

/// Inverse of `tokens_to_map` on raw arrays, used by round-trip checks.
pub fn map_to_tokens_raw(map: &Arr) -> Arr {
    let sh = map.shape();
    let (b, d, gh, gw) = (sh[0], sh[1], sh[2], sh[3]);
    map.view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[b, gh * gw, d]))
        .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    S8,
    S16,
    S32,
}

impl Scale {
    pub fn stride(self) -> usize {
        match self {
            Scale::S8 => 8,
            Scale::S16 => 16,
            Scale::S32 => 32,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scale::S8 => "s8",
            Scale::S16 => "s16",
            Scale::S32 => "s32",
        }
    }
}

/// Project the token map to width d_f, resize it from the stride-14 grid to
/// the stride-s grid, and add the 1x1-projected conv prior.
pub fn align_fuse(
    fwd: &Fwd,
    token_map: &Tensor,
    prior: &Tensor,
    scale: Scale,
    image_hw: (usize, usize),
) -> Result<Tensor> {
    let s = scale.stride();
    let (oh, ow) = (image_hw.0 / s, image_hw.1 / s);
    if prior.shape()[2] != oh || prior.shape()[3] != ow {
        return Err(Error::shape(format!(
            "prior {:?} does not sit at stride {s} of {:?}",
            prior.shape(),
            image_hw
        )));
    }
    let p = format!("dense.fuse.{}", scale.name());
    let tw = fwd.get(&format!("{p}.token_proj.weight"));
    let tb = fwd.get(&format!("{p}.token_proj.bias"));
    let projected = ops::conv2d(token_map, &tw, Some(&tb), 1, 0);
    let resized = ops::bilinear2d(&projected, oh, ow);
    let pw = fwd.get(&format!("{p}.prior_proj.weight"));
    let prior_proj = ops::conv2d(prior, &pw, None, 1, 0);
    Ok(ops::add(&resized, &prior_proj))
}

fn psi(fwd: &Fwd, prefix: &str, x: &Tensor, momentum: f64) -> Tensor {
    let w1 = fwd.get(&format!("{prefix}.conv1.weight"));
    let b1 = fwd.get(&format!("{prefix}.conv1.bias"));
    let y = ops::conv2d(x, &w1, Some(&b1), 1, 1);
    let y = batch_norm_param(fwd, &format!("{prefix}.bn1"), &y, momentum);
    let y = ops::relu(&y);
    let w2 = fwd.get(&format!("{prefix}.conv2.weight"));
    let b2 = fwd.get(&format!("{prefix}.conv2.bias"));
    let y = ops::conv2d(&y, &w2, Some(&b2), 1, 1);
    let y = batch_norm_param(fwd, &format!("{prefix}.bn2"), &y, momentum);
    ops::relu(&y)
}

/// Two upsampling stages, each 2x bilinear + channel concat with the finer
/// scale + two 3x3 conv/BN/ReLU layers, then a 1x1 conv to class logits at
/// 1/8 resolution.
pub fn decode(fwd: &Fwd, cfg: &DenseConfig, f8: &Tensor, f16: &Tensor, f32_: &Tensor) -> Result<Tensor> {
    for (name, f) in [("F8", f8), ("F16", f16), ("F32", f32_)] {
        if f.shape()[1] != cfg.d_f {
            return Err(Error::shape(format!(
                "{name} width {} != d_f {}",
                f.shape()[1],
                cfg.d_f
            )));
        }
    }
    let up32 = ops::bilinear2d(f32_, f16.shape()[2], f16.shape()[3]);
    let u16 = psi(fwd, "dense.decode.0", &ops::concat(&[up32, f16.clone()], 1), cfg.bn_momentum);
    let up16 = ops::bilinear2d(&u16, f8.shape()[2], f8.shape()[3]);
    let u8_ = psi(fwd, "dense.decode.1", &ops::concat(&[up16, f8.clone()], 1), cfg.bn_momentum);
    let hw = fwd.get("dense.head.weight");
    let hb = fwd.get("dense.head.bias");
    Ok(ops::conv2d(&u8_, &hw, Some(&hb), 1, 0))
}

/// Full adapter forward from cached encoder taps (one `Tokens` per scale,
/// shallow to deep).
pub fn forward_from_taps(
    fwd: &Fwd,
    cfg: &DenseConfig,
    taps: &[Tokens; 3],
    image: &ImageBatch,
) -> Result<Tensor> {
    let hw = (image.height(), image.width());
    let (c8, c16, c32) = conv_pyramid(fwd, cfg, image)?;
    let f8 = align_fuse(fwd, &tokens_to_map(&taps[0])?, &c8, Scale::S8, hw)?;
    let f16 = align_fuse(fwd, &tokens_to_map(&taps[1])?, &c16, Scale::S16, hw)?;
    let f32_ = align_fuse(fwd, &tokens_to_map(&taps[2])?, &c32, Scale::S32, hw)?;
    decode(fwd, cfg, &f8, &f16, &f32_)
}

/// Encoder taps + adapter in one pass (frozen-encoder inference path).
pub fn forward_dense(
    fwd: &Fwd,
    enc_cfg: &EncoderConfig,
    cfg: &DenseConfig,
    image: &ImageBatch,
) -> Result<Tensor> {
    let enc = Encoder::new(fwd, enc_cfg, "encoder");
    let taps = enc.forward_with_intermediates(image, &cfg.taps()?)?;
    let taps: [Tokens; 3] = [taps[0].clone(), taps[1].clone(), taps[2].clone()];
    forward_from_taps(fwd, cfg, &taps, image)
}

/// Per-image cached tap token tensors with their grids, shallow to deep.
type CachedTaps = [(Arr, (usize, usize)); 3];

#[derive(Debug, Clone)]
pub struct SegEpoch {
    pub epoch: usize,
    pub split: String,
    pub miou: f64,
    pub dice: f64,
    pub f1: f64,
}

impl SegEpoch {
    pub fn csv_header() -> &'static str {
        "epoch,split,miou,dice,f1"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.split, self.miou, self.dice, self.f1
        )
    }
}

#[derive(Debug)]
pub struct SegRun {
    pub store: ParameterStore,
    pub best_store: ParameterStore,
    pub best_epoch: usize,
    pub history: Vec<SegEpoch>,
}

/// Predicted mask: argmax over classes of the logits bilinearly upsampled to
/// the full image resolution.
pub fn predict_mask(
    store: &ParameterStore,
    enc_cfg: &EncoderConfig,
    cfg: &DenseConfig,
    image: &ImageBatch,
) -> Result<Vec<Array2<u8>>> {
    let bind = Bindings::eval(store);
    let fwd = Fwd::eval(&bind);
    let logits = forward_dense(&fwd, enc_cfg, cfg, image)?;
    let (h, w) = (image.height(), image.width());
    let up = ops::bilinear2d(&logits, h, w);
    let v = up.value();
    let mut out = Vec::with_capacity(image.batch());
    for bi in 0..image.batch() {
        let mut mask = Array2::<u8>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                for c in 1..cfg.n_classes {
                    if v[[bi, c, i, j]] > v[[bi, best, i, j]] {
                        best = c;
                    }
                }
                mask[(i, j)] = best as u8;
            }
        }
        out.push(mask);
    }
    Ok(out)
}

fn pixel_ce_loss(logits: &Tensor, masks: &[&Array2<u8>], image_hw: (usize, usize)) -> Tensor {
    let (h, w) = image_hw;
    let up = ops::bilinear2d(logits, h, w);
    let (b, k) = (up.shape()[0], up.shape()[1]);
    let logp = ops::log_softmax(&up, 1);
    let flat = ops::reshape(&ops::permute(&logp, &[0, 2, 3, 1]), &[b * h * w, k]);
    let mut targets = Vec::with_capacity(b * h * w);
    for mask in masks {
        for v in mask.iter() {
            targets.push(*v as usize);
        }
    }
    let nll = ops::nll_sum(&flat, &targets, None);
    ops::scale(&nll, 1.0 / (b * h * w) as f64)
}

/// Frozen-encoder segmentation training: encoder taps are computed once per
/// image, only `dense.*` parameters receive gradients. Returns the
/// best-validation-mIoU snapshot.
pub fn train_segmenter(dataset: &SegDataset, cfg: &DenseConfig, enc_cfg: &EncoderConfig) -> Result<SegRun> {
    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParameterStore::new();
    register_encoder(&mut store, enc_cfg, "encoder", &mut rng)?;
    store.freeze_prefix("encoder.");
    register_dense(&mut store, cfg, enc_cfg.embed_dim, &mut rng)?;
    train_segmenter_with(store, dataset, cfg, enc_cfg, &mut rng)
}

pub fn train_segmenter_with(
    mut store: ParameterStore,
    dataset: &SegDataset,
    cfg: &DenseConfig,
    enc_cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<SegRun> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::data("segmentation dataset has an empty split"));
    }
    for (split, name) in [(&dataset.train, "train"), (&dataset.val, "val")] {
        for (img, mask) in split.images.iter().zip(&split.masks) {
            if (img.shape()[1], img.shape()[2]) != mask.dim() {
                return Err(Error::data(format!(
                    "{name}: image {:?} vs mask {:?} size mismatch",
                    &img.shape()[1..],
                    mask.dim()
                )));
            }
        }
    }
    let taps_idx = cfg.taps()?;

    // Cache encoder taps once per image: the encoder is frozen.
    let cache_taps = |images: &[Arr]| -> Result<Vec<CachedTaps>> {
        let bind = Bindings::eval(&store);
        let fwd = Fwd::eval(&bind);
        let enc = Encoder::new(&fwd, enc_cfg, "encoder");
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
            let taps = enc.forward_with_intermediates(&batch, &taps_idx)?;
            let as_raw = |t: &Tokens| (t.x.value().clone(), t.grid);
            out.push([as_raw(&taps[0]), as_raw(&taps[1]), as_raw(&taps[2])]);
        }
        Ok(out)
    };
    let train_taps = cache_taps(&dataset.train.images)?;
    let val_taps = cache_taps(&dataset.val.images)?;

    let gather = |cache: &[CachedTaps], idx: &[usize]| -> [Tokens; 3] {
        std::array::from_fn(|k| {
            let views: Vec<_> = idx
                .iter()
                .map(|&i| cache[i][k].0.view())
                .collect();
            let x = ndarray::concatenate(ndarray::Axis(0), &views).unwrap().into_dyn();
            Tokens {
                x: Tensor::lit(x),
                grid: cache[idx[0]][k].1,
            }
        })
    };

    let mut opt = AdamW::new();
    let mut history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_store = store.clone();

    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.train.len(), cfg.seed, epoch as u64);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let images: Vec<Arr> = chunk.iter().map(|&i| dataset.train.images[i].clone()).collect();
            let batch = ImageBatch::from_images(&images)?;
            let masks: Vec<&Array2<u8>> = chunk.iter().map(|&i| &dataset.train.masks[i]).collect();
            let taps = gather(&train_taps, chunk);

            let bind = Bindings::train(&store);
            let updates;
            {
                let fwd = Fwd::train(&bind, rng);
                let logits = forward_from_taps(&fwd, cfg, &taps, &batch)?;
                let loss = pixel_ce_loss(&logits, &masks, (batch.height(), batch.width()));
                if !loss.item().is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite segmentation loss at epoch {epoch}"
                    )));
                }
                loss.backward();
                updates = fwd.take_buffer_updates();
            }
            let grads = bind.grads();
            opt.step(&mut store, &grads, cfg.learning_rate, cfg.weight_decay)?;
            for (path, value) in updates {
                store.set_value(&path, value)?;
            }
        }

        // Validation metrics from full-resolution argmax masks.
        let scores = eval_cached(&store, cfg, &dataset.val.images, &dataset.val.masks, &val_taps)?;
        history.push(SegEpoch {
            epoch,
            split: "val".into(),
            miou: scores.miou,
            dice: scores.dice,
            f1: scores.f1,
        });
        if scores.miou > best {
            best = scores.miou;
            best_epoch = epoch;
            best_store = store.clone();
        }
        if let Some(target) = cfg.early_stop_miou {
            if scores.miou >= target {
                break;
            }
        }
    }
    Ok(SegRun {
        store,
        best_store,
        best_epoch,
        history,
    })
}

fn eval_cached(
    store: &ParameterStore,
    cfg: &DenseConfig,
    images: &[Arr],
    masks: &[Array2<u8>],
    taps: &[CachedTaps],
) -> Result<SegScores> {
    let bind = Bindings::eval(store);
    let fwd = Fwd::eval(&bind);
    let mut acc = SegAccumulator::new(cfg.n_classes);
    for (i, img) in images.iter().enumerate() {
        let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
        let tap: [Tokens; 3] = std::array::from_fn(|k| Tokens {
            x: Tensor::lit(taps[i][k].0.clone()),
            grid: taps[i][k].1,
        });
        let logits = forward_from_taps(&fwd, cfg, &tap, &batch)?;
        let up = ops::bilinear2d(&logits, batch.height(), batch.width());
        let v = up.value();
        let (h, w) = (batch.height(), batch.width());
        let mut pred = Array2::<u8>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut bestc = 0usize;
                for k in 1..cfg.n_classes {
                    if v[[0, k, r, c]] > v[[0, bestc, r, c]] {
                        bestc = k;
                    }
                }
                pred[(r, c)] = bestc as u8;
            }
        }
        acc.add(pred.view(), masks[i].view())
            .map_err(|e| Error::data(e.to_string()))?;
    }
    acc.finalize().map_err(|e| Error::data(e.to_string()))
}
