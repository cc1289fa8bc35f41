//! Global-crops-only self-distillation pretraining: student/teacher encoder
//! pair with EMA updates, projection heads onto a weight-normalized
//! prototype layer, logit centering, masked-patch distillation and the
//! per-step schedule plumbing.

use ndarray::{Array2, Axis, IxDyn};
use radenc_core::error::{Error, Result};
use radenc_core::image::{
    gaussian_blur, hflip_image, intensity_jitter, random_resized_crop, resize_image,
};
use radenc_core::ops;
use radenc_core::optim::AdamW;
use radenc_core::schedule::TrainSchedule;
use radenc_core::tensor::{Arr, Bindings, Tensor};
use radenc_core::{ImageBatch, ParameterStore, Rng};
use serde::{Deserialize, Serialize};

use crate::encoder::{register as register_encoder, Encoder, EncoderConfig};
use crate::fwd::Fwd;

// ---------------------------------------------------------------------------
// Projection head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub layers: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl HeadConfig {
    pub fn desk(prototypes: usize) -> Self {
        HeadConfig {
            layers: 3,
            hidden: 2048,
            bottleneck: 256,
            prototypes,
        }
    }
}

/// MLP (`layers` deep, GELU between) to a bottleneck, then an L2-normalized
/// bottleneck against weight-normalized prototypes.
pub fn register_head(
    store: &mut ParameterStore,
    prefix: &str,
    in_dim: usize,
    cfg: &HeadConfig,
    rng: &mut Rng,
) -> Result<()> {
    if cfg.layers == 0 || cfg.prototypes == 0 {
        return Err(Error::config("projection head needs layers >= 1 and prototypes >= 1"));
    }
    let mut dims = Vec::with_capacity(cfg.layers + 1);
    dims.push(in_dim);
    for _ in 0..cfg.layers.saturating_sub(1) {
        dims.push(cfg.hidden);
    }
    dims.push(cfg.bottleneck);
    for (i, pair) in dims.windows(2).enumerate() {
        let w = Arr::from_shape_fn(IxDyn(&[pair[1], pair[0]]), |_| rng.trunc_normal(0.02));
        store.insert(&format!("{prefix}.mlp.{i}.weight"), w)?;
        store.insert_zeros(&format!("{prefix}.mlp.{i}.bias"), &[pair[1]])?;
    }
    let protos = Arr::from_shape_fn(IxDyn(&[cfg.prototypes, cfg.bottleneck]), |_| {
        rng.trunc_normal(0.02)
    });
    store.insert(&format!("{prefix}.prototypes.weight"), protos)?;
    Ok(())
}

/// `[.., in_dim] -> [.., prototypes]` logits.
pub fn head_forward(fwd: &Fwd, prefix: &str, cfg: &HeadConfig, x: &Tensor) -> Tensor {
    let mut h = x.clone();
    for i in 0..cfg.layers {
        let w = fwd.get(&format!("{prefix}.mlp.{i}.weight"));
        let b = fwd.get(&format!("{prefix}.mlp.{i}.bias"));
        h = ops::linear(&h, &w, Some(&b));
        if i + 1 < cfg.layers {
            h = ops::gelu(&h);
        }
    }
    let h = ops::l2_normalize(&h, 1e-12);
    let protos = fwd.get(&format!("{prefix}.prototypes.weight"));
    let protos_n = ops::l2_normalize(&protos, 1e-12);
    ops::linear(&h, &protos_n, None)
}

// ---------------------------------------------------------------------------
// Crops and masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub flip_p: f64,
    pub jitter: f64,
    pub blur_p: f64,
    /// Test flag: identity views (resize only, no randomness).
    pub augment: bool,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            scale: (0.32, 1.0),
            flip_p: 0.5,
            jitter: 0.2,
            blur_p: 0.5,
            augment: true,
        }
    }
}

/// Augmented global views of every image in the batch; no local crops exist
/// anywhere in this pipeline. View `v` of the batch is `out[v]`.
pub fn make_global_crops(
    batch: &ImageBatch,
    n_crops: usize,
    crop_size: usize,
    params: &CropParams,
    rng: &mut Rng,
) -> Result<Vec<ImageBatch>> {
    if batch.height() < crop_size || batch.width() < crop_size {
        return Err(Error::shape(format!(
            "source {}x{} smaller than crop {crop_size}",
            batch.height(),
            batch.width()
        )));
    }
    let mut views = Vec::with_capacity(n_crops);
    for _ in 0..n_crops {
        let mut imgs = Vec::with_capacity(batch.batch());
        for i in 0..batch.batch() {
            let img = batch.image(i);
            let out = if params.augment {
                let mut v =
                    random_resized_crop(&img, crop_size, params.scale, (0.75, 4.0 / 3.0), rng);
                if rng.bernoulli(params.flip_p) {
                    v = hflip_image(&v);
                }
                let scale = 1.0 + rng.uniform(-params.jitter, params.jitter);
                let shift = rng.uniform(-params.jitter / 2.0, params.jitter / 2.0);
                v = intensity_jitter(&v, scale, shift);
                if rng.bernoulli(params.blur_p) {
                    let sigma = rng.uniform(0.1, 2.0);
                    v = gaussian_blur(&v, sigma);
                }
                v
            } else if (batch.height(), batch.width()) == (crop_size, crop_size) {
                img
            } else {
                resize_image(&img, crop_size, crop_size)
            };
            imgs.push(out);
        }
        views.push(ImageBatch::from_images(&imgs)?);
    }
    Ok(views)
}

/// Boolean token mask `[B, N]`; per-sample masked count = round(ratio * N),
/// ratio drawn uniformly from `ratio_range`. The class token is untouched by
/// construction (masks address patch positions only).
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub mask: Array2<bool>,
}

impl MaskSpec {
    pub fn none(b: usize, n: usize) -> Self {
        MaskSpec {
            mask: Array2::from_elem((b, n), false),
        }
    }

    pub fn random(b: usize, n: usize, ratio_range: (f64, f64), rng: &mut Rng) -> Self {
        let mut mask = Array2::from_elem((b, n), false);
        for bi in 0..b {
            let r = rng.uniform(ratio_range.0, ratio_range.1);
            let count = ((r * n as f64).round() as usize).min(n);
            for idx in rng.sample_indices(n, count) {
                mask[(bi, idx)] = true;
            }
        }
        MaskSpec { mask }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Row-wise softmax of `(logits - center) / temp`, computed outside the tape:
/// teacher targets are detached by construction.
fn teacher_targets(logits: &Arr, center: &Arr, temp: f64) -> Arr {
    let mut out = logits.clone();
    let p = *out.shape().last().unwrap();
    let rows = out.len() / p;
    let mut flat = out.view_mut().into_shape_with_order((rows, p)).unwrap();
    let c = center.view().into_shape_with_order(p).unwrap();
    for mut row in flat.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..p {
            row[j] = (row[j] - c[j]) / temp;
            max = max.max(row[j]);
        }
        let mut denom = 0.0;
        for j in 0..p {
            row[j] = (row[j] - max).exp();
            denom += row[j];
        }
        for j in 0..p {
            row[j] /= denom;
        }
    }
    out
}

/// Cross-view distillation loss on class-token logits. Student views carry
/// gradients; teacher views are plain arrays (already detached). The loss is
/// the mean over ordered view pairs (s != t) of the batch-mean cross-entropy
/// between the centered, sharpened teacher distribution and the student's
/// tempered log-softmax.
pub fn dino_loss(
    student_logits: &[Tensor],
    teacher_logits: &[Arr],
    t_student: f64,
    t_teacher: f64,
    center: &Arr,
) -> Result<Tensor> {
    if t_student <= 0.0 || t_teacher <= 0.0 {
        return Err(Error::domain("temperatures must be positive"));
    }
    if student_logits.is_empty() || teacher_logits.is_empty() {
        return Err(Error::domain("need at least one view per side"));
    }
    let mut pair_losses: Vec<Tensor> = Vec::new();
    for (ti, t_log) in teacher_logits.iter().enumerate() {
        let q = teacher_targets(t_log, center, t_teacher);
        let b = q.shape()[0] as f64;
        for (si, s_log) in student_logits.iter().enumerate() {
            if si == ti {
                continue;
            }
            let logp = ops::log_softmax(&ops::scale(s_log, 1.0 / t_student), 1);
            let ce = ops::scale(
                &ops::sum_all(&ops::mul(&Tensor::lit(q.clone()), &logp)),
                -1.0 / b,
            );
            pair_losses.push(ce);
        }
    }
    if pair_losses.is_empty() {
        return Err(Error::domain("no cross-view pairs (single aligned view)"));
    }
    let n = pair_losses.len() as f64;
    let mut total = pair_losses[0].clone();
    for p in &pair_losses[1..] {
        total = ops::add(&total, p);
    }
    Ok(ops::scale(&total, 1.0 / n))
}

pub struct IbotLoss {
    pub loss: Tensor,
    pub masked_tokens: usize,
    /// Set when the mask was empty and the loss degenerated to 0.
    pub empty_mask: bool,
}

/// Masked-patch distillation: cross-entropy between the teacher's patch
/// distributions (same view, unmasked input) and the student's predictions
/// at masked positions, averaged over masked positions only.
pub fn ibot_loss(
    student_patch_logits: &Tensor,
    teacher_patch_logits: &Arr,
    mask: &MaskSpec,
    t_student: f64,
    t_teacher: f64,
    center: &Arr,
) -> Result<IbotLoss> {
    if t_student <= 0.0 || t_teacher <= 0.0 {
        return Err(Error::domain("temperatures must be positive"));
    }
    let shape = student_patch_logits.shape();
    let (b, n) = (shape[0], shape[1]);
    if mask.mask.dim() != (b, n) {
        return Err(Error::shape(format!(
            "mask {:?} vs logits ({b}, {n})",
            mask.mask.dim()
        )));
    }
    let count = mask.masked_count();
    if count == 0 {
        return Ok(IbotLoss {
            loss: Tensor::scalar(0.0),
            masked_tokens: 0,
            empty_mask: true,
        });
    }
    let q = teacher_targets(teacher_patch_logits, center, t_teacher);
    let logp = ops::log_softmax(&ops::scale(student_patch_logits, 1.0 / t_student), 2);
    let mut sel = Arr::zeros(IxDyn(&[b, n, 1]));
    for bi in 0..b {
        for t in 0..n {
            if mask.mask[(bi, t)] {
                sel[[bi, t, 0]] = 1.0;
            }
        }
    }
    let ce = ops::mul(&ops::mul(&Tensor::lit(q), &logp), &Tensor::lit(sel));
    let loss = ops::scale(&ops::sum_all(&ce), -1.0 / count as f64);
    Ok(IbotLoss {
        loss,
        masked_tokens: count,
        empty_mask: false,
    })
}

// ---------------------------------------------------------------------------
// Teacher state
// ---------------------------------------------------------------------------

/// EMA copy of the student plus the centering vectors of both heads.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParameterStore,
    pub dino_center: Arr,
    pub ibot_center: Arr,
}

impl TeacherState {
    pub fn from_student(student: &ParameterStore, prototypes: usize) -> Self {
        TeacherState {
            params: student.clone(),
            dino_center: Arr::zeros(IxDyn(&[prototypes])),
            ibot_center: Arr::zeros(IxDyn(&[prototypes])),
        }
    }
}

/// In-place EMA: every teacher tensor <- m * teacher + (1 - m) * student.
pub fn update_teacher(
    student: &ParameterStore,
    teacher: &mut ParameterStore,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::domain(format!("momentum {m} outside [0,1]")));
    }
    if !student.same_structure(teacher) {
        return Err(Error::config("student/teacher structure mismatch"));
    }
    let paths = teacher.paths();
    for path in paths {
        let s = student.value(&path)?;
        let t = teacher.value(&path)?;
        let mut new = t.clone();
        ndarray::Zip::from(&mut new).and(s).for_each(|tv, &sv| {
            *tv = m * *tv + (1.0 - m) * sv;
        });
        teacher.set_value(&path, new)?;
    }
    Ok(())
}

/// EMA centering: center <- (1 - rate) * center + rate * batch mean.
pub fn update_center(center: &mut Arr, teacher_logits: &Arr, rate: f64) {
    let p = *teacher_logits.shape().last().unwrap();
    let rows = teacher_logits.len() / p;
    let flat = teacher_logits.view().into_shape_with_order((rows, p)).unwrap();
    let mean = flat.mean_axis(Axis(0)).unwrap();
    let c = center.view_mut().into_shape_with_order(p).unwrap();
    ndarray::Zip::from(c).and(&mean).for_each(|cv, &mv| {
        *cv = (1.0 - rate) * *cv + rate * mv;
    });
}

// ---------------------------------------------------------------------------
// Pretraining configuration and loop
// ---------------------------------------------------------------------------

fn default_student_arch() -> String {
    "vit_small".to_string()
}
fn default_optimizer() -> String {
    "adamw".to_string()
}
fn d_batch() -> usize {
    256
}
fn d_patch() -> usize {
    14
}
fn d_drop_path() -> f64 {
    0.3
}
fn d_layer_scale() -> f64 {
    1e-5
}
fn d_epochs() -> usize {
    10
}
fn d_base_lr() -> f64 {
    2e-4
}
fn d_min_lr() -> f64 {
    1e-6
}
fn d_wd_start() -> f64 {
    0.04
}
fn d_wd_end() -> f64 {
    0.2
}
fn d_m_start() -> f64 {
    0.994
}
fn d_m_end() -> f64 {
    1.0
}
fn d_temp_warm() -> f64 {
    0.04
}
fn d_temp() -> f64 {
    0.07
}
fn d_student_temp() -> f64 {
    0.1
}
fn d_one() -> f64 {
    1.0
}
fn d_protos() -> usize {
    512
}
fn d_bottleneck() -> usize {
    256
}
fn d_head_layers() -> usize {
    3
}
fn d_head_hidden() -> usize {
    2048
}
fn d_crop() -> usize {
    224
}
fn d_two() -> usize {
    2
}
fn d_mask_min() -> f64 {
    0.1
}
fn d_mask_max() -> f64 {
    0.5
}
fn d_center_rate() -> f64 {
    0.1
}
fn d_lr_warmup_frac() -> f64 {
    0.1
}
fn d_temp_warmup_frac() -> f64 {
    0.3
}
fn d_crop_scale_min() -> f64 {
    0.32
}
fn d_true() -> bool {
    true
}

/// Key names mirror the pretraining hyperparameter table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_student_arch")]
    pub student_architecture: String,
    #[serde(default = "d_batch")]
    pub batch_size_per_gpu: usize,
    /// Ambiguous in multi-device setups; kept explicit here.
    #[serde(default)]
    pub effective_batch: Option<usize>,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_drop_path")]
    pub drop_path_rate: f64,
    #[serde(default = "d_layer_scale")]
    pub layer_scale: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_base_lr")]
    pub base_learning_rate: f64,
    #[serde(default = "d_min_lr")]
    pub min_learning_rate: f64,
    #[serde(default = "d_wd_start")]
    pub weight_decay_start: f64,
    #[serde(default = "d_wd_end")]
    pub weight_decay_end: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_m_start")]
    pub teacher_momentum_start: f64,
    #[serde(default = "d_m_end")]
    pub teacher_momentum_end: f64,
    #[serde(default = "d_temp_warm")]
    pub warmup_teacher_temperature: f64,
    #[serde(default = "d_temp")]
    pub teacher_temperature: f64,
    #[serde(default = "d_student_temp")]
    pub student_temperature: f64,
    #[serde(default = "d_one")]
    pub dino_loss_weight: f64,
    #[serde(default = "d_one")]
    pub ibot_loss_weight: f64,
    #[serde(default = "d_protos")]
    pub dino_ibot_prototypes: usize,
    #[serde(default = "d_bottleneck")]
    pub dino_ibot_bottleneck_dim: usize,
    #[serde(default = "d_head_layers")]
    pub dino_ibot_head_layers: usize,
    #[serde(default = "d_head_hidden")]
    pub dino_ibot_head_hidden_dim: usize,
    #[serde(default = "d_crop")]
    pub global_crop_size: usize,
    #[serde(default = "d_two")]
    pub n_global_crops: usize,
    #[serde(default = "d_mask_min")]
    pub mask_ratio_min: f64,
    #[serde(default = "d_mask_max")]
    pub mask_ratio_max: f64,
    #[serde(default = "d_center_rate")]
    pub center_rate: f64,
    #[serde(default = "d_lr_warmup_frac")]
    pub lr_warmup_frac: f64,
    #[serde(default = "d_temp_warmup_frac")]
    pub teacher_temp_warmup_frac: f64,
    #[serde(default = "d_crop_scale_min")]
    pub crop_scale_min: f64,
    #[serde(default = "d_one")]
    pub crop_scale_max: f64,
    #[serde(default = "d_true")]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl PretrainConfig {
    /// Desk-scale configuration used by tests: tiny encoder, small crops.
    /// Layer scale starts at 1.0 and the teacher momentum at 0.5: with the
    /// full-scale defaults (1e-5, 0.994) the class token barely varies
    /// across images and the teacher barely moves within a 50-step run,
    /// leaving nothing learnable at this scale.
    pub fn tiny_test() -> Self {
        PretrainConfig {
            student_architecture: "vit_tiny".into(),
            batch_size_per_gpu: 8,
            global_crop_size: 56,
            dino_ibot_prototypes: 64,
            dino_ibot_head_hidden_dim: 64,
            dino_ibot_bottleneck_dim: 32,
            base_learning_rate: 3e-3,
            layer_scale: 1.0,
            teacher_momentum_start: 0.5,
            ..PretrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "adamw" {
            return Err(Error::config(format!(
                "unsupported optimizer `{}`",
                self.optimizer
            )));
        }
        if self.n_global_crops == 0 {
            return Err(Error::config("n_global_crops must be >= 1"));
        }
        if !(self.mask_ratio_min <= self.mask_ratio_max && self.mask_ratio_min >= 0.0) {
            return Err(Error::config("mask ratio range invalid"));
        }
        if !self.global_crop_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "crop size {} not a multiple of patch size {}",
                self.global_crop_size, self.patch_size
            )));
        }
        self.encoder_config()?.validate()
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let grid = self.global_crop_size / self.patch_size;
        let base = match self.student_architecture.as_str() {
            "vit_tiny" => EncoderConfig::tiny(),
            "vit_small" => EncoderConfig::small(),
            "vit_base" => EncoderConfig::base(),
            other => {
                return Err(Error::config(format!(
                    "unknown student_architecture `{other}`"
                )))
            }
        };
        Ok(EncoderConfig {
            patch_size: self.patch_size,
            drop_path_rate: self.drop_path_rate,
            layer_scale_init: self.layer_scale,
            pos_grid: (grid, grid),
            ..base
        })
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            layers: self.dino_ibot_head_layers,
            hidden: self.dino_ibot_head_hidden_dim,
            bottleneck: self.dino_ibot_bottleneck_dim,
            prototypes: self.dino_ibot_prototypes,
        }
    }

    fn crop_params(&self) -> CropParams {
        CropParams {
            scale: (self.crop_scale_min, self.crop_scale_max),
            augment: self.augment,
            ..CropParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub step: u64,
    pub lr: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
    pub dino: f64,
    pub ibot: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn csv_header() -> &'static str {
        "step,lr,momentum,teacher_temp,dino,ibot,total"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.momentum, self.teacher_temp, self.dino, self.ibot, self.total
        )
    }
}

pub struct Pretrainer {
    pub cfg: PretrainConfig,
    pub enc_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub student: ParameterStore,
    pub teacher: TeacherState,
    pub schedule: TrainSchedule,
    pub rng: Rng,
    opt: AdamW,
    step: u64,
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        let enc_cfg = cfg.encoder_config()?;
        let head_cfg = cfg.head_config();
        let mut rng = Rng::seed_from(cfg.seed);
        let mut student = ParameterStore::new();
        register_encoder(&mut student, &enc_cfg, "encoder", &mut rng)?;
        register_head(&mut student, "dino_head", enc_cfg.embed_dim, &head_cfg, &mut rng)?;
        register_head(&mut student, "ibot_head", enc_cfg.embed_dim, &head_cfg, &mut rng)?;
        let teacher = TeacherState::from_student(&student, head_cfg.prototypes);
        let schedule = TrainSchedule {
            base_lr: cfg.base_learning_rate,
            min_lr: cfg.min_learning_rate,
            weight_decay_start: cfg.weight_decay_start,
            weight_decay_end: cfg.weight_decay_end,
            teacher_momentum_start: cfg.teacher_momentum_start,
            teacher_momentum_end: cfg.teacher_momentum_end,
            teacher_temp_warmup: cfg.warmup_teacher_temperature,
            teacher_temp_final: cfg.teacher_temperature,
            warmup_steps: (total_steps as f64 * cfg.lr_warmup_frac).round() as u64,
            teacher_temp_warmup_steps: (total_steps as f64 * cfg.teacher_temp_warmup_frac).round()
                as u64,
            total_steps,
        };
        schedule.validate()?;
        Ok(Pretrainer {
            cfg,
            enc_cfg,
            head_cfg,
            student,
            teacher,
            schedule,
            rng,
            opt: AdamW::new(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimization step on a batch of source images: global crops,
    /// teacher targets from unmasked views, student predictions from masked
    /// views, combined loss, AdamW update, teacher EMA and center updates.
    pub fn pretrain_step(&mut self, batch: &ImageBatch) -> Result<StepLosses> {
        let lr = self.schedule.lr(self.step);
        let wd = self.schedule.weight_decay(self.step);
        let momentum = self.schedule.teacher_momentum(self.step);
        let t_teacher = self.schedule.teacher_temp(self.step);
        let t_student = self.cfg.student_temperature;

        let views = make_global_crops(
            batch,
            self.cfg.n_global_crops,
            self.cfg.global_crop_size,
            &self.cfg.crop_params(),
            &mut self.rng,
        )?;
        let b = batch.batch();
        let grid = self.cfg.global_crop_size / self.cfg.patch_size;
        let n = grid * grid;
        let mask_range = (self.cfg.mask_ratio_min, self.cfg.mask_ratio_max);
        let masks: Vec<MaskSpec> = (0..views.len())
            .map(|_| MaskSpec::random(b, n, mask_range, &mut self.rng))
            .collect();

        // Teacher forward on unmasked views (no tape: everything constant).
        let teacher_bind = Bindings::eval(&self.teacher.params);
        let t_fwd = Fwd::eval(&teacher_bind);
        let t_enc = Encoder::new(&t_fwd, &self.enc_cfg, "encoder");
        let mut teacher_cls: Vec<Arr> = Vec::with_capacity(views.len());
        let mut teacher_patch: Vec<Arr> = Vec::with_capacity(views.len());
        for view in &views {
            let tokens = t_enc.forward(view)?;
            let cls_logits = head_forward(&t_fwd, "dino_head", &self.head_cfg, &tokens.cls());
            teacher_cls.push(cls_logits.value().clone());
            let patch_logits =
                head_forward(&t_fwd, "ibot_head", &self.head_cfg, &tokens.patches());
            teacher_patch.push(patch_logits.value().clone());
        }

        // Student forward on masked views.
        let student_bind = Bindings::train(&self.student);
        let losses = {
            let s_fwd = Fwd::train(&student_bind, &mut self.rng);
            let s_enc = Encoder::new(&s_fwd, &self.enc_cfg, "encoder");
            let mut student_cls: Vec<Tensor> = Vec::with_capacity(views.len());
            let mut ibot_terms: Vec<(Tensor, usize)> = Vec::new();
            for (vi, view) in views.iter().enumerate() {
                let tokens = s_enc.forward_masked(view, Some(&masks[vi].mask))?;
                student_cls.push(head_forward(&s_fwd, "dino_head", &self.head_cfg, &tokens.cls()));
                let patch_logits =
                    head_forward(&s_fwd, "ibot_head", &self.head_cfg, &tokens.patches());
                let part = ibot_loss(
                    &patch_logits,
                    &teacher_patch[vi],
                    &masks[vi],
                    t_student,
                    t_teacher,
                    &self.teacher.ibot_center,
                )?;
                if !part.empty_mask {
                    ibot_terms.push((part.loss, part.masked_tokens));
                }
            }

            let dino = dino_loss(
                &student_cls,
                &teacher_cls,
                t_student,
                t_teacher,
                &self.teacher.dino_center,
            )?;
            let total_masked: usize = ibot_terms.iter().map(|(_, c)| c).sum();
            let ibot = if total_masked == 0 {
                Tensor::scalar(0.0)
            } else {
                let mut acc = Tensor::scalar(0.0);
                for (loss, count) in &ibot_terms {
                    acc = ops::add(&acc, &ops::scale(loss, *count as f64 / total_masked as f64));
                }
                acc
            };
            let total = ops::add(
                &ops::scale(&dino, self.cfg.dino_loss_weight),
                &ops::scale(&ibot, self.cfg.ibot_loss_weight),
            );

            let (dv, iv, tv) = (dino.item(), ibot.item(), total.item());
            if !tv.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at step {} (lr {lr:.3e}, wd {wd:.3e}, momentum {momentum:.6}, \
                     teacher_temp {t_teacher:.4}, dino {dv:.6}, ibot {iv:.6})",
                    self.step
                )));
            }
            total.backward();
            (dv, iv, tv)
        };

        let grads = student_bind.grads();
        self.opt.step(&mut self.student, &grads, lr, wd)?;

        update_teacher(&self.student, &mut self.teacher.params, momentum)?;
        let all_cls = ndarray::concatenate(
            Axis(0),
            &teacher_cls.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        update_center(&mut self.teacher.dino_center, &all_cls, self.cfg.center_rate);
        let patch_views: Vec<_> = teacher_patch
            .iter()
            .map(|a| {
                a.view()
                    .into_shape_with_order((b * n, self.head_cfg.prototypes))
                    .unwrap()
            })
            .collect();
        let all_patch = ndarray::concatenate(Axis(0), &patch_views)
            .unwrap()
            .into_dyn();
        update_center(&mut self.teacher.ibot_center, &all_patch, self.cfg.center_rate);

        let out = StepLosses {
            step: self.step,
            lr,
            momentum,
            teacher_temp: t_teacher,
            dino: losses.0,
            ibot: losses.1,
            total: losses.2,
        };
        self.step += 1;
        self.student.set_step(self.step);
        Ok(out)
    }

    /// Epoch/batch loop over an in-memory image list. Returns one loss row
    /// per step.
    pub fn run(&mut self, images: &[Arr], epochs: usize) -> Result<Vec<StepLosses>> {
        if images.is_empty() {
            return Err(Error::data("pretraining corpus is empty"));
        }
        let bs = self.cfg.batch_size_per_gpu.min(images.len());
        let mut rows = Vec::new();
        for epoch in 0..epochs {
            let order = radenc_data::epoch_order(images.len(), self.cfg.seed, epoch as u64);
            for chunk in order.chunks(bs) {
                let batch: Vec<Arr> = chunk.iter().map(|&i| images[i].clone()).collect();
                let batch = ImageBatch::from_images(&batch)?;
                rows.push(self.pretrain_step(&batch)?);
            }
        }
        Ok(rows)
    }

    /// Planned number of optimizer steps for a corpus of `n` images.
    pub fn steps_for(cfg: &PretrainConfig, n: usize) -> u64 {
        let bs = cfg.batch_size_per_gpu.min(n).max(1);
        (n.div_ceil(bs) * cfg.epochs) as u64
    }
}
