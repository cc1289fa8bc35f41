//! Image batches and the raw (non-differentiable) image transforms used by
//! augmentation pipelines: resized crops, flips, rotation, intensity jitter
//! and Gaussian blur. All transforms operate on `[C,H,W]` f64 arrays.

use ndarray::{ArrayD, ArrayView3, ArrayViewMut3, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::ops::bilinear_resize_raw;
use crate::rng::Rng;
use crate::tensor::Arr;

/// A batch of normalized images, shape `[B, C, H, W]` with C = 3.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Arr,
}

impl ImageBatch {
    pub fn new(data: Arr) -> Result<ImageBatch> {
        if data.ndim() != 4 {
            return Err(Error::shape(format!(
                "ImageBatch expects [B,C,H,W], got {:?}",
                data.shape()
            )));
        }
        if data.shape()[1] != 3 {
            return Err(Error::shape(format!(
                "ImageBatch expects 3 channels, got {}",
                data.shape()[1]
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("ImageBatch contains NaN/Inf"));
        }
        Ok(ImageBatch { data })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Stack single images `[C,H,W]` into a batch.
    pub fn from_images(images: &[Arr]) -> Result<ImageBatch> {
        if images.is_empty() {
            return Err(Error::data("empty image list"));
        }
        let views: Vec<_> = images.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::shape(format!("stack images: {e}")))?;
        ImageBatch::new(data)
    }

    pub fn image(&self, i: usize) -> Arr {
        self.data
            .index_axis(Axis(0), i)
            .to_owned()
            .into_dyn()
    }
}

/// Replicate a single-channel `[H,W]` image to `[3,H,W]`.
pub fn gray_to_rgb(img: &ndarray::Array2<f64>) -> Arr {
    let (h, w) = img.dim();
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for c in 0..3 {
        out.slice_mut(ndarray::s![c, .., ..]).assign(img);
    }
    out
}

fn as3(a: &Arr) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality().expect("[C,H,W] image")
}

/// Bilinear resize of a `[C,H,W]` image.
pub fn resize_image(img: &Arr, oh: usize, ow: usize) -> Arr {
    let v = img.view().insert_axis(Axis(0)).to_owned().into_dyn();
    let r = bilinear_resize_raw(&v, oh, ow);
    r.index_axis(Axis(0), 0).to_owned().into_dyn()
}

/// Crop `[C,H,W]` to the given window (must fit).
pub fn crop_image(img: &Arr, top: usize, left: usize, h: usize, w: usize) -> Arr {
    let v = as3(img);
    v.slice(ndarray::s![.., top..top + h, left..left + w])
        .to_owned()
        .into_dyn()
}

pub fn hflip_image(img: &Arr) -> Arr {
    let v = as3(img);
    let mut out = v.to_owned();
    out.invert_axis(Axis(2));
    out.into_dyn().as_standard_layout().to_owned()
}

/// Random resized crop: area scale in `scale`, aspect ratio log-uniform in
/// `ratio`, resized to `out x out`.
pub fn random_resized_crop(
    img: &Arr,
    out: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut Rng,
) -> Arr {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.uniform(scale.0, scale.1);
        let ar = (rng.uniform(ratio.0.ln(), ratio.1.ln())).exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = if ch == h { 0 } else { rng.below(h - ch + 1) };
            let left = if cw == w { 0 } else { rng.below(w - cw + 1) };
            let crop = crop_image(img, top, left, ch, cw);
            return resize_image(&crop, out, out);
        }
    }
    // Fallback: center crop of the largest fitting square.
    let side = h.min(w);
    let crop = crop_image(img, (h - side) / 2, (w - side) / 2, side, side);
    resize_image(&crop, out, out)
}

/// Rotate around the image center by `degrees`, bilinear sampling,
/// out-of-bounds reads as 0.
pub fn rotate_image(img: &Arr, degrees: f64) -> Arr {
    let v = as3(img);
    let (c, h, w) = v.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    {
        let mut ov: ArrayViewMut3<f64> = out.view_mut().into_dimensionality().unwrap();
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    // Inverse mapping: sample source at the rotated position.
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    let sy = cy + dy * cos - dx * sin;
                    let sx = cx + dy * sin + dx * cos;
                    if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                        continue;
                    }
                    let y0 = sy.floor() as usize;
                    let x0 = sx.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fy = sy - y0 as f64;
                    let fx = sx - x0 as f64;
                    let v00 = v[(ci, y0, x0)];
                    let v01 = v[(ci, y0, x1)];
                    let v10 = v[(ci, y1, x0)];
                    let v11 = v[(ci, y1, x1)];
                    let r0 = v00 + fx * (v01 - v00);
                    let r1 = v10 + fx * (v11 - v10);
                    ov[(ci, i, j)] = r0 + fy * (r1 - r0);
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Arr, sigma: f64) -> Arr {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for k in -radius..=radius {
        let v = (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let v = as3(img);
    let (c, h, w) = v.dim();
    let mut tmp = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * v[(ci, i, jj)];
                }
                tmp[(ci, i, j)] = acc;
            }
        }
    }
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let ii = (i as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ci, ii, j)];
                }
                out[(ci, i, j)] = acc;
            }
        }
    }
    out.into_dyn()
}

/// Affine intensity jitter: `img * scale + shift`.
pub fn intensity_jitter(img: &Arr, scale: f64, shift: f64) -> Arr {
    img.mapv(|v| v * scale + shift)
}
