//! Vision Transformer encoder: non-overlapping linear patch embedding with
//! a learned class token and interpolatable positional embeddings, pre-norm
//! blocks with layer scale and per-sample stochastic depth, and intermediate
//! layer taps for dense adapters.

use ndarray::{Array2, IxDyn};
use radenc_core::error::{Error, Result};
use radenc_core::ops;
use radenc_core::tensor::{Arr, Tensor};
use radenc_core::{ImageBatch, ParameterStore, Rng, TokenSequence};
use serde::{Deserialize, Serialize};

use crate::fwd::{layer_norm_param, linear_param, Fwd};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub drop_path_rate: f64,
    pub layer_scale_init: f64,
    pub mlp_ratio: f64,
    /// Grid the positional embeddings are stored at; other grids are reached
    /// by bilinear interpolation of the patch part.
    pub pos_grid: (usize, usize),
}

impl EncoderConfig {
    /// Desk-scale preset used throughout the test suite.
    pub fn tiny() -> Self {
        EncoderConfig {
            depth: 4,
            embed_dim: 64,
            heads: 4,
            patch_size: 14,
            drop_path_rate: 0.3,
            layer_scale_init: 1e-5,
            mlp_ratio: 4.0,
            pos_grid: (4, 4),
        }
    }

    pub fn small() -> Self {
        EncoderConfig {
            depth: 12,
            embed_dim: 384,
            heads: 6,
            patch_size: 14,
            drop_path_rate: 0.3,
            layer_scale_init: 1e-5,
            mlp_ratio: 4.0,
            pos_grid: (16, 16),
        }
    }

    pub fn base() -> Self {
        EncoderConfig {
            embed_dim: 768,
            heads: 12,
            ..EncoderConfig::small()
        }
    }

    /// depth 0 is legal: the encoder reduces to the terminal norm.
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::config("encoder: embed_dim and heads must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "encoder: embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config("encoder: drop_path_rate must be in [0,1)"));
        }
        if self.layer_scale_init < 0.0 {
            return Err(Error::config("encoder: layer_scale_init must be >= 0"));
        }
        if self.patch_size == 0 {
            return Err(Error::config("encoder: patch_size must be positive"));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Stochastic-depth rate of block `i`, scaled linearly across depth.
    pub fn drop_path_at(&self, i: usize) -> f64 {
        if self.depth <= 1 {
            return 0.0;
        }
        self.drop_path_rate * i as f64 / (self.depth - 1) as f64
    }
}

fn trunc_normal_arr(shape: &[usize], std: f64, rng: &mut Rng) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.trunc_normal(std))
}

/// Register encoder parameters under `prefix` (canonically `encoder`).
pub fn register(store: &mut ParameterStore, cfg: &EncoderConfig, prefix: &str, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let ps = cfg.patch_size;
    let h = cfg.hidden_dim();
    let n0 = cfg.pos_grid.0 * cfg.pos_grid.1;
    let std = 0.02;

    store.insert(&format!("{prefix}.patch_embed.weight"), trunc_normal_arr(&[d, 3 * ps * ps], std, rng))?;
    store.insert_zeros(&format!("{prefix}.patch_embed.bias"), &[d])?;
    store.insert(&format!("{prefix}.cls_token"), trunc_normal_arr(&[1, 1, d], std, rng))?;
    store.insert(&format!("{prefix}.pos_embed"), trunc_normal_arr(&[1, 1 + n0, d], std, rng))?;
    store.insert(&format!("{prefix}.mask_token"), trunc_normal_arr(&[1, 1, d], std, rng))?;

    for i in 0..cfg.depth {
        let b = format!("{prefix}.blocks.{i}");
        store.insert(&format!("{b}.norm1.gamma"), Arr::from_elem(IxDyn(&[d]), 1.0))?;
        store.insert_zeros(&format!("{b}.norm1.beta"), &[d])?;
        for name in ["q", "k", "v", "proj"] {
            store.insert(&format!("{b}.attn.{name}.weight"), trunc_normal_arr(&[d, d], std, rng))?;
            store.insert_zeros(&format!("{b}.attn.{name}.bias"), &[d])?;
        }
        store.insert(&format!("{b}.ls1"), Arr::from_elem(IxDyn(&[d]), cfg.layer_scale_init))?;
        store.insert(&format!("{b}.norm2.gamma"), Arr::from_elem(IxDyn(&[d]), 1.0))?;
        store.insert_zeros(&format!("{b}.norm2.beta"), &[d])?;
        store.insert(&format!("{b}.mlp.fc1.weight"), trunc_normal_arr(&[h, d], std, rng))?;
        store.insert_zeros(&format!("{b}.mlp.fc1.bias"), &[h])?;
        store.insert(&format!("{b}.mlp.fc2.weight"), trunc_normal_arr(&[d, h], std, rng))?;
        store.insert_zeros(&format!("{b}.mlp.fc2.bias"), &[d])?;
        store.insert(&format!("{b}.ls2"), Arr::from_elem(IxDyn(&[d]), cfg.layer_scale_init))?;
    }
    store.insert(&format!("{prefix}.norm.gamma"), Arr::from_elem(IxDyn(&[d]), 1.0))?;
    store.insert_zeros(&format!("{prefix}.norm.beta"), &[d])?;
    Ok(())
}

/// Token tensor `[B, 1+N, D]` (class token first) with its patch grid.
#[derive(Clone)]
pub struct Tokens {
    pub x: Tensor,
    pub grid: (usize, usize),
}

impl Tokens {
    pub fn batch(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[2]
    }

    /// `[B, D]` class token.
    pub fn cls(&self) -> Tensor {
        let b = self.batch();
        let d = self.dim();
        ops::reshape(&ops::narrow(&self.x, 1, 0, 1), &[b, d])
    }

    /// `[B, N, D]` patch tokens.
    pub fn patches(&self) -> Tensor {
        ops::narrow(&self.x, 1, 1, self.num_patches())
    }

    /// Detach into a plain-array token sequence.
    pub fn to_sequence(&self) -> TokenSequence {
        TokenSequence::new(
            self.patches().value().clone(),
            self.cls().value().clone(),
            self.grid,
        )
        .expect("consistent tokens")
    }
}

pub struct Encoder<'f, 'a> {
    pub fwd: &'f Fwd<'a>,
    pub cfg: &'f EncoderConfig,
    pub prefix: &'f str,
}

impl<'f, 'a> Encoder<'f, 'a> {
    pub fn new(fwd: &'f Fwd<'a>, cfg: &'f EncoderConfig, prefix: &'f str) -> Self {
        Encoder { fwd, cfg, prefix }
    }

    /// Rearrange images into non-overlapping patch vectors, project them,
    /// prepend the class token and add positional embeddings. An optional
    /// boolean mask `[B, N]` replaces masked patch embeddings with the
    /// learned mask token before positions are added.
    pub fn patchify(&self, image: &ImageBatch) -> Result<Tokens> {
        self.patchify_masked(image, None)
    }

    pub fn patchify_masked(&self, image: &ImageBatch, mask: Option<&Array2<bool>>) -> Result<Tokens> {
        let ps = self.cfg.patch_size;
        let (b, h, w) = (image.batch(), image.height(), image.width());
        if h % ps != 0 || w % ps != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not a multiple of patch size {ps}"
            )));
        }
        let grid = (h / ps, w / ps);
        let n = grid.0 * grid.1;
        let d = self.cfg.embed_dim;

        // [B, N, 3*ps*ps] patch matrix, row-major over the grid.
        let mut patches = Arr::zeros(IxDyn(&[b, n, 3 * ps * ps]));
        let img = &image.data;
        for bi in 0..b {
            for gi in 0..grid.0 {
                for gj in 0..grid.1 {
                    let t = gi * grid.1 + gj;
                    let mut col = 0usize;
                    for c in 0..3 {
                        for pi in 0..ps {
                            for pj in 0..ps {
                                patches[[bi, t, col]] = img[[bi, c, gi * ps + pi, gj * ps + pj]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }

        let w_embed = self.fwd.get(&format!("{}.patch_embed.weight", self.prefix));
        let b_embed = self.fwd.get(&format!("{}.patch_embed.bias", self.prefix));
        let mut x = ops::linear(&Tensor::lit(patches), &w_embed, Some(&b_embed));

        if let Some(mask) = mask {
            if mask.dim() != (b, n) {
                return Err(Error::shape(format!(
                    "mask {:?} does not match token layout ({b}, {n})",
                    mask.dim()
                )));
            }
            let mut keep = Arr::zeros(IxDyn(&[b, n, 1]));
            let mut drop = Arr::zeros(IxDyn(&[b, n, 1]));
            for bi in 0..b {
                for t in 0..n {
                    let m = mask[(bi, t)];
                    keep[[bi, t, 0]] = if m { 0.0 } else { 1.0 };
                    drop[[bi, t, 0]] = if m { 1.0 } else { 0.0 };
                }
            }
            let mask_token = self.fwd.get(&format!("{}.mask_token", self.prefix));
            let kept = ops::mul(&x, &Tensor::lit(keep));
            let masked = ops::mul(&mask_token, &Tensor::lit(drop));
            x = ops::add(&kept, &masked);
        }

        // Class token broadcast to the batch.
        let cls = self.fwd.get(&format!("{}.cls_token", self.prefix));
        let cls_b = ops::add(&cls, &Tensor::lit(Arr::zeros(IxDyn(&[b, 1, d]))));
        let x = ops::concat(&[cls_b, x], 1);

        // Positional embeddings, patch part resized when the grid differs.
        let pos = self.fwd.get(&format!("{}.pos_embed", self.prefix));
        let (g0h, g0w) = self.cfg.pos_grid;
        let pos = if grid == (g0h, g0w) {
            pos
        } else {
            let cls_pos = ops::narrow(&pos, 1, 0, 1);
            let patch_pos = ops::narrow(&pos, 1, 1, g0h * g0w);
            let as_map = ops::permute(&ops::reshape(&patch_pos, &[1, g0h, g0w, d]), &[0, 3, 1, 2]);
            let resized = ops::bilinear2d(&as_map, grid.0, grid.1);
            let back = ops::reshape(&ops::permute(&resized, &[0, 2, 3, 1]), &[1, n, d]);
            ops::concat(&[cls_pos, back], 1)
        };
        let x = ops::add(&x, &pos);
        Ok(Tokens { x, grid })
    }

    fn block(&self, i: usize, x: &Tensor) -> Tensor {
        block_fwd(self.fwd, self.cfg, self.prefix, i, x)
    }

    /// Run the block stack and the terminal norm.
    pub fn forward_tokens(&self, tokens: Tokens) -> Result<Tokens> {
        if tokens.dim() != self.cfg.embed_dim {
            return Err(Error::shape(format!(
                "token dim {} != embed dim {}",
                tokens.dim(),
                self.cfg.embed_dim
            )));
        }
        let mut x = tokens.x;
        for i in 0..self.cfg.depth {
            x = self.block(i, &x);
        }
        let x = layer_norm_param(self.fwd, &format!("{}.norm", self.prefix), &x);
        Ok(Tokens { x, grid: tokens.grid })
    }

    pub fn forward(&self, image: &ImageBatch) -> Result<Tokens> {
        let tokens = self.patchify(image)?;
        self.forward_tokens(tokens)
    }

    pub fn forward_masked(&self, image: &ImageBatch, mask: Option<&Array2<bool>>) -> Result<Tokens> {
        let tokens = self.patchify_masked(image, mask)?;
        self.forward_tokens(tokens)
    }

    /// Single pass returning post-block token states (before the terminal
    /// norm) at the requested 0-based layer indices, in request order.
    /// Stochastic depth never applies here: taps feed frozen-encoder use.
    pub fn forward_with_intermediates(&self, image: &ImageBatch, layers: &[usize]) -> Result<Vec<Tokens>> {
        for &l in layers {
            if l >= self.cfg.depth {
                return Err(Error::range(format!(
                    "tap layer {l} out of range for depth {}",
                    self.cfg.depth
                )));
            }
        }
        let tokens = self.patchify(image)?;
        let grid = tokens.grid;
        let mut states: Vec<Option<Tensor>> = vec![None; self.cfg.depth];
        let mut x = tokens.x;
        // Taps are an inference-path feature: stochastic depth stays off
        // even when the surrounding step is in train mode.
        let eval_fwd = Fwd::eval(self.fwd.bindings());
        for i in 0..self.cfg.depth {
            x = block_fwd(&eval_fwd, self.cfg, self.prefix, i, &x);
            if layers.contains(&i) {
                states[i] = Some(x.clone());
            }
        }
        Ok(layers
            .iter()
            .map(|&l| Tokens {
                x: states[l].clone().expect("tap recorded"),
                grid,
            })
            .collect())
    }

    /// Terminal norm only, for callers that tapped a pre-norm state.
    pub fn final_norm(&self, tokens: Tokens) -> Tokens {
        let x = layer_norm_param(self.fwd, &format!("{}.norm", self.prefix), &tokens.x);
        Tokens { x, grid: tokens.grid }
    }
}

fn block_fwd(fwd: &Fwd, cfg: &EncoderConfig, prefix: &str, i: usize, x: &Tensor) -> Tensor {
    let p = format!("{prefix}.blocks.{i}");
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let (b, t) = (x.shape()[0], x.shape()[1]);

    // Attention branch.
    let h = layer_norm_param(fwd, &format!("{p}.norm1"), x);
    let split = |y: &Tensor| {
        let y = ops::reshape(y, &[b, t, heads, dh]);
        let y = ops::permute(&y, &[0, 2, 1, 3]);
        ops::reshape(&y, &[b * heads, t, dh])
    };
    let q = split(&linear_param(fwd, &format!("{p}.attn.q"), &h));
    let k = split(&linear_param(fwd, &format!("{p}.attn.k"), &h));
    let v = split(&linear_param(fwd, &format!("{p}.attn.v"), &h));
    let kt = ops::permute(&k, &[0, 2, 1]);
    let scores = ops::scale(&ops::matmul(&q, &kt), 1.0 / (dh as f64).sqrt());
    let attn = ops::softmax(&scores, 2);
    let o = ops::matmul(&attn, &v);
    let o = ops::reshape(
        &ops::permute(&ops::reshape(&o, &[b, heads, t, dh]), &[0, 2, 1, 3]),
        &[b, t, d],
    );
    let o = linear_param(fwd, &format!("{p}.attn.proj"), &o);
    let o = ops::mul(&o, &fwd.get(&format!("{p}.ls1")));
    let o = drop_path(fwd, &o, cfg.drop_path_at(i), b);
    let x = ops::add(x, &o);

    // MLP branch.
    let h = layer_norm_param(fwd, &format!("{p}.norm2"), &x);
    let h = linear_param(fwd, &format!("{p}.mlp.fc1"), &h);
    let h = ops::gelu(&h);
    let h = linear_param(fwd, &format!("{p}.mlp.fc2"), &h);
    let h = ops::mul(&h, &fwd.get(&format!("{p}.ls2")));
    let h = drop_path(fwd, &h, cfg.drop_path_at(i), b);
    ops::add(&x, &h)
}

/// Per-sample stochastic depth: kept branches scale by 1/(1-p).
fn drop_path(fwd: &Fwd, branch: &Tensor, p: f64, batch: usize) -> Tensor {
    if !fwd.train || p <= 0.0 {
        return branch.clone();
    }
    let mut mask = Arr::zeros(IxDyn(&[batch, 1, 1]));
    fwd.with_rng(|rng| {
        for bi in 0..batch {
            mask[[bi, 0, 0]] = if rng.bernoulli(1.0 - p) { 1.0 / (1.0 - p) } else { 0.0 };
        }
    });
    ops::mul(branch, &Tensor::lit(mask))
}
