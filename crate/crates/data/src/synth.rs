//! Synthetic corpora: class-coded Gaussian blobs for classification, bright
//! squares on dark noise for segmentation, and shape/position scenes with
//! template captions. Pure functions of their seed; split 60/20/20 with
//! class-balanced interleaving.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, IxDyn};
use radenc_core::error::Result;
use radenc_core::rng::Rng;
use radenc_core::tensor::Arr;

use crate::dataset::{CapDataset, CapSplit, ClsDataset, ClsSplit, SegDataset, SegSplit};
use crate::manifest::{Entry, Manifest, NormStats, Splits, TaskKind};
use crate::png_io::{write_png_gray, write_png_rgb};

fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n * 6 / 10).max(1);
    let val = ((n - train) / 2).max(1).min(n - train);
    let test = n - train - val;
    (train, val, test)
}

/// Channel mean/std over a set of raw [0,1] images.
fn channel_stats(images: &[Arr]) -> ([f64; 3], [f64; 3]) {
    let mut mean = [0.0; 3];
    let mut count = 0usize;
    for img in images {
        for c in 0..3 {
            mean[c] += img.slice(ndarray::s![c, .., ..]).sum();
        }
        count += img.shape()[1] * img.shape()[2];
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = [0.0; 3];
    for img in images {
        for c in 0..3 {
            var[c] += img
                .slice(ndarray::s![c, .., ..])
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
    }
    let std = var.map(|v| (v / count as f64).sqrt().max(1e-6));
    (mean, std)
}

fn normalize(img: &Arr, mean: &[f64; 3], std: &[f64; 3]) -> Arr {
    let mut out = img.clone();
    for c in 0..3 {
        let mut sl = out.slice_mut(ndarray::s![c, .., ..]);
        sl.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    out
}

fn gray_image(size: usize, f: impl Fn(usize, usize) -> f64) -> Arr {
    let mut out = Arr::zeros(IxDyn(&[3, size, size]));
    for i in 0..size {
        for j in 0..size {
            let v = f(i, j).clamp(0.0, 1.0);
            out[[0, i, j]] = v;
            out[[1, i, j]] = v;
            out[[2, i, j]] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Blobs (classification)
// ---------------------------------------------------------------------------

/// Raw blob images plus labels, before normalization.
pub struct RawBlobs {
    pub images: Vec<Arr>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub size: usize,
}

pub fn synth_blobs_raw(n: usize, n_classes: usize, size: usize, seed: u64) -> RawBlobs {
    assert!(n > 0 && n_classes >= 2);
    let mut rng = Rng::seed_from(seed);
    let sigma = size as f64 / 6.0;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_classes;
        let angle = std::f64::consts::TAU * k as f64 / n_classes as f64;
        let cy = size as f64 / 2.0 + (size as f64 / 4.0) * angle.sin();
        let cx = size as f64 / 2.0 + (size as f64 / 4.0) * angle.cos();
        // Small per-image wobble keeps images distinct without breaking
        // linear separability.
        let dy = rng.uniform(-1.5, 1.5);
        let dx = rng.uniform(-1.5, 1.5);
        let noise: Vec<f64> = (0..size * size).map(|_| rng.normal() * 0.02).collect();
        let img = gray_image(size, |i, j| {
            let d2 = (i as f64 - cy - dy).powi(2) + (j as f64 - cx - dx).powi(2);
            0.1 + 0.85 * (-d2 / (2.0 * sigma * sigma)).exp() + noise[i * size + j]
        });
        images.push(img);
        labels.push(k);
    }
    RawBlobs {
        images,
        labels,
        n_classes,
        size,
    }
}

/// Normalized, split dataset ready for training.
pub fn synth_blobs(n: usize, n_classes: usize, size: usize, seed: u64) -> ClsDataset {
    let raw = synth_blobs_raw(n, n_classes, size, seed);
    let (ntr, nva, _) = split_counts(n);
    let (mean, std) = channel_stats(&raw.images[..ntr]);
    let mut splits = [ClsSplit::default(), ClsSplit::default(), ClsSplit::default()];
    for (i, (img, &label)) in raw.images.iter().zip(raw.labels.iter()).enumerate() {
        let s = if i < ntr {
            0
        } else if i < ntr + nva {
            1
        } else {
            2
        };
        splits[s].images.push(normalize(img, &mean, &std));
        splits[s].labels.push(label);
    }
    let [train, val, test] = splits;
    ClsDataset {
        train,
        val,
        test,
        n_classes,
    }
}

// ---------------------------------------------------------------------------
// Squares (segmentation)
// ---------------------------------------------------------------------------

pub struct RawSquares {
    pub images: Vec<Arr>,
    pub masks: Vec<Array2<u8>>,
    pub size: usize,
}

pub fn synth_squares_raw(n: usize, size: usize, seed: u64) -> RawSquares {
    assert!(n > 0);
    let mut rng = Rng::seed_from(seed);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let side = size / 4 + rng.below(size / 4 + 1);
        let top = rng.below(size - side + 1);
        let left = rng.below(size - side + 1);
        let noise: Vec<f64> = (0..size * size).map(|_| rng.normal() * 0.01).collect();
        let img = gray_image(size, |i, j| {
            let inside = i >= top && i < top + side && j >= left && j < left + side;
            let base = if inside { 0.95 } else { 0.05 };
            base + noise[i * size + j]
        });
        let mut mask = Array2::<u8>::zeros((size, size));
        mask.slice_mut(ndarray::s![top..top + side, left..left + side])
            .fill(1);
        images.push(img);
        masks.push(mask);
    }
    RawSquares { images, masks, size }
}

pub fn synth_squares(n: usize, size: usize, seed: u64) -> SegDataset {
    let raw = synth_squares_raw(n, size, seed);
    let (ntr, nva, _) = split_counts(n);
    let (mean, std) = channel_stats(&raw.images[..ntr]);
    let mut splits = [SegSplit::default(), SegSplit::default(), SegSplit::default()];
    for (i, (img, mask)) in raw.images.iter().zip(raw.masks.iter()).enumerate() {
        let s = if i < ntr {
            0
        } else if i < ntr + nva {
            1
        } else {
            2
        };
        splits[s].images.push(normalize(img, &mean, &std));
        splits[s].masks.push(mask.clone());
    }
    let [train, val, test] = splits;
    SegDataset {
        train,
        val,
        test,
        n_classes: 2,
    }
}

// ---------------------------------------------------------------------------
// Shapes with captions
// ---------------------------------------------------------------------------

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "cross"];
pub const POSITION_NAMES: [&str; 2] = ["top", "bottom"];

pub struct RawShapes {
    pub images: Vec<Arr>,
    pub captions: Vec<String>,
    pub size: usize,
}

fn draw_shape(size: usize, shape: usize, position: usize, noise: &[f64]) -> Arr {
    let cy = if position == 0 { size / 4 } else { 3 * size / 4 } as f64;
    let cx = size as f64 / 2.0;
    let r = size as f64 / 6.0;
    let bar = (size as f64 / 14.0).max(1.0);
    gray_image(size, |i, j| {
        let (di, dj) = (i as f64 - cy, j as f64 - cx);
        let inside = match shape {
            0 => di * di + dj * dj <= r * r,
            1 => di.abs() <= r && dj.abs() <= r,
            _ => (di.abs() <= bar && dj.abs() <= r) || (dj.abs() <= bar && di.abs() <= r),
        };
        let base = if inside { 0.9 } else { 0.05 };
        base + noise[i * size + j]
    })
}

pub fn synth_shapes_captions_raw(n: usize, size: usize, seed: u64) -> RawShapes {
    assert!(n > 0);
    let mut rng = Rng::seed_from(seed);
    let mut images = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for i in 0..n {
        let shape = i % 3;
        let position = (i / 3) % 2;
        let noise: Vec<f64> = (0..size * size).map(|_| rng.normal() * 0.01).collect();
        images.push(draw_shape(size, shape, position, &noise));
        captions.push(format!(
            "{} at {}",
            SHAPE_NAMES[shape], POSITION_NAMES[position]
        ));
    }
    RawShapes {
        images,
        captions,
        size,
    }
}

pub fn synth_shapes_captions(n: usize, size: usize, seed: u64) -> CapDataset {
    let raw = synth_shapes_captions_raw(n, size, seed);
    let (ntr, nva, _) = split_counts(n);
    let (mean, std) = channel_stats(&raw.images[..ntr]);
    let mut splits = [CapSplit::default(), CapSplit::default(), CapSplit::default()];
    for (i, (img, caption)) in raw.images.iter().zip(raw.captions.iter()).enumerate() {
        let s = if i < ntr {
            0
        } else if i < ntr + nva {
            1
        } else {
            2
        };
        splits[s].images.push(normalize(img, &mean, &std));
        splits[s].captions.push(caption.clone());
    }
    let [train, val, test] = splits;
    CapDataset { train, val, test }
}

// ---------------------------------------------------------------------------
// Materialization to manifest + PNG files
// ---------------------------------------------------------------------------

fn quantize(img: &Arr) -> Array3<u8> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        (img[[ci, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

fn entry_splits<F: Fn(usize) -> Entry>(n: usize, make: F) -> Splits {
    let (ntr, nva, _) = split_counts(n);
    let mut splits = Splits::default();
    for i in 0..n {
        let e = make(i);
        if i < ntr {
            splits.train.push(e);
        } else if i < ntr + nva {
            splits.val.push(e);
        } else {
            splits.test.push(e);
        }
    }
    splits
}

/// Write a synthetic dataset to `dir` as PNGs plus `manifest.json`. The
/// manifest's normalization statistics are computed from the quantized
/// training images so a reload normalizes consistently.
pub fn materialize(dir: &Path, task: TaskKind, n: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("img"))?;
    let (ntr, _, _) = split_counts(n);

    let (raw_images, entries, n_classes): (Vec<Arr>, Splits, Option<usize>) = match task {
        TaskKind::Classification => {
            let raw = synth_blobs_raw(n, 2, size, seed);
            let entries = entry_splits(n, |i| Entry {
                image: format!("img/{i:04}.png"),
                label: Some(raw.labels[i]),
                mask: None,
                caption: None,
            });
            (raw.images, entries, Some(2))
        }
        TaskKind::Segmentation => {
            std::fs::create_dir_all(dir.join("mask"))?;
            let raw = synth_squares_raw(n, size, seed);
            for (i, mask) in raw.masks.iter().enumerate() {
                write_png_gray(&dir.join(format!("mask/{i:04}.png")), mask)?;
            }
            let entries = entry_splits(n, |i| Entry {
                image: format!("img/{i:04}.png"),
                label: None,
                mask: Some(format!("mask/{i:04}.png")),
                caption: None,
            });
            (raw.images, entries, Some(2))
        }
        TaskKind::Captioning => {
            let raw = synth_shapes_captions_raw(n, size, seed);
            let captions = raw.captions.clone();
            let entries = entry_splits(n, |i| Entry {
                image: format!("img/{i:04}.png"),
                label: None,
                mask: None,
                caption: Some(captions[i].clone()),
            });
            (raw.images, entries, None)
        }
        TaskKind::Pretrain => {
            let raw = synth_blobs_raw(n, 2, size, seed);
            let entries = entry_splits(n, |i| Entry {
                image: format!("img/{i:04}.png"),
                label: None,
                mask: None,
                caption: None,
            });
            (raw.images, entries, None)
        }
    };

    let mut dequantized = Vec::with_capacity(ntr);
    for (i, img) in raw_images.iter().enumerate() {
        let q = quantize(img);
        write_png_rgb(&dir.join(format!("img/{i:04}.png")), &q)?;
        if i < ntr {
            dequantized.push(q.mapv(|v| v as f64 / 255.0).into_dyn());
        }
    }
    let (mean, std) = channel_stats(&dequantized);

    let manifest = Manifest {
        task,
        n_classes,
        image_size: size,
        normalization: NormStats {
            mean: mean.to_vec(),
            std: std.to_vec(),
        },
        splits: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(path)
}
