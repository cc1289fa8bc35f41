//! JSON dataset manifests: task kind, class count, normalization statistics
//! and per-split file lists with relative paths. Loading validates split
//! disjointness, file existence and label ranges, then resizes and
//! normalizes per the manifest.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use radenc_core::error::{Error, Result};
use radenc_core::image::resize_image;
use radenc_core::tensor::Arr;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    CapDataset, CapSplit, ClsDataset, ClsSplit, Dataset, PretrainDataset, SegDataset, SegSplit,
};
use crate::png_io::{read_png_image, read_png_mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pretrain,
    Classification,
    Segmentation,
    Captioning,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<Entry>,
    pub val: Vec<Entry>,
    pub test: Vec<Entry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub image_size: usize,
    pub normalization: NormStats,
    pub splits: Splits,
}

impl Manifest {
    pub fn parse(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("manifest `{}`: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("manifest `{}`: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.normalization.mean.len() != 3 || self.normalization.std.len() != 3 {
            return Err(Error::config("normalization stats must have 3 channels"));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("normalization std must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        // Splits must be disjoint on image paths.
        let mut seen: HashSet<&str> = HashSet::new();
        for split in [&self.splits.train, &self.splits.val, &self.splits.test] {
            for e in split {
                if !seen.insert(e.image.as_str()) {
                    return Err(Error::config(format!(
                        "image `{}` appears in more than one split",
                        e.image
                    )));
                }
            }
        }
        match self.task {
            TaskKind::Classification => {
                if self.n_classes.is_none() {
                    return Err(Error::config("classification manifest needs n_classes"));
                }
            }
            TaskKind::Segmentation
                if self.n_classes.is_none() => {
                    return Err(Error::config("segmentation manifest needs n_classes"));
                }
            _ => {}
        }
        Ok(())
    }
}

fn load_image(root: &Path, rel: &str, size: usize, stats: &NormStats) -> Result<Arr> {
    let mut img = read_png_image(&root.join(rel))?;
    if img.shape()[1] != size || img.shape()[2] != size {
        img = resize_image(&img, size, size);
    }
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        img.slice_mut(ndarray::s![c, .., ..])
            .mapv_inplace(|v| (v - m) / s);
    }
    Ok(img)
}

fn nearest_resize_mask(mask: &Array2<u8>, size: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((size, size), |(i, j)| {
        let si = (i * h) / size;
        let sj = (j * w) / size;
        mask[(si, sj)]
    })
}

/// Load the typed dataset a manifest describes.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::parse(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let size = manifest.image_size;
    let stats = &manifest.normalization;

    match manifest.task {
        TaskKind::Classification => {
            let n_classes = manifest.n_classes.unwrap();
            let mut splits = [ClsSplit::default(), ClsSplit::default(), ClsSplit::default()];
            for (si, entries) in [&manifest.splits.train, &manifest.splits.val, &manifest.splits.test]
                .into_iter()
                .enumerate()
            {
                for e in entries {
                    let label = e.label.ok_or_else(|| {
                        Error::data(format!("entry `{}` is missing a label", e.image))
                    })?;
                    if label >= n_classes {
                        return Err(Error::data(format!(
                            "label {label} out of range for `{}` (n_classes {n_classes})",
                            e.image
                        )));
                    }
                    splits[si].images.push(load_image(root, &e.image, size, stats)?);
                    splits[si].labels.push(label);
                }
            }
            let [train, val, test] = splits;
            Ok(Dataset::Cls(ClsDataset {
                train,
                val,
                test,
                n_classes,
            }))
        }
        TaskKind::Segmentation => {
            let n_classes = manifest.n_classes.unwrap();
            let mut splits = [SegSplit::default(), SegSplit::default(), SegSplit::default()];
            for (si, entries) in [&manifest.splits.train, &manifest.splits.val, &manifest.splits.test]
                .into_iter()
                .enumerate()
            {
                for e in entries {
                    let mask_rel = e.mask.as_deref().ok_or_else(|| {
                        Error::data(format!("entry `{}` is missing a mask", e.image))
                    })?;
                    let mut mask = read_png_mask(&root.join(mask_rel))?;
                    if mask.dim() != (size, size) {
                        mask = nearest_resize_mask(&mask, size);
                    }
                    if let Some(&bad) = mask.iter().find(|&&v| v as usize >= n_classes) {
                        return Err(Error::data(format!(
                            "mask `{mask_rel}` has label {bad} >= n_classes {n_classes}"
                        )));
                    }
                    splits[si].images.push(load_image(root, &e.image, size, stats)?);
                    splits[si].masks.push(mask);
                }
            }
            let [train, val, test] = splits;
            Ok(Dataset::Seg(SegDataset {
                train,
                val,
                test,
                n_classes,
            }))
        }
        TaskKind::Captioning => {
            let mut splits = [CapSplit::default(), CapSplit::default(), CapSplit::default()];
            for (si, entries) in [&manifest.splits.train, &manifest.splits.val, &manifest.splits.test]
                .into_iter()
                .enumerate()
            {
                for e in entries {
                    let caption = e.caption.clone().ok_or_else(|| {
                        Error::data(format!("entry `{}` is missing a caption", e.image))
                    })?;
                    splits[si].images.push(load_image(root, &e.image, size, stats)?);
                    splits[si].captions.push(caption);
                }
            }
            let [train, val, test] = splits;
            Ok(Dataset::Cap(CapDataset { train, val, test }))
        }
        TaskKind::Pretrain => {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for e in &manifest.splits.train {
                train.push(load_image(root, &e.image, size, stats)?);
            }
            for e in &manifest.splits.val {
                val.push(load_image(root, &e.image, size, stats)?);
            }
            Ok(Dataset::Pretrain(PretrainDataset { train, val }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::materialize;

    fn tmp(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("radenc-manifest-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn materialized_cls_round_trip_split_sizes() {
        let dir = tmp("cls");
        let path = materialize(&dir, TaskKind::Classification, 8, 28, 5).unwrap();
        let Dataset::Cls(ds) = load_dataset(&path).unwrap() else {
            panic!("wrong task")
        };
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 8);
        assert_eq!(ds.n_classes, 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn explicit_split_sizes_preserved() {
        // 4/2/2 manifest -> iterators of exactly those lengths.
        let dir = tmp("sizes");
        materialize(&dir, TaskKind::Classification, 8, 28, 5).unwrap();
        let mut manifest = Manifest::parse(&dir.join("manifest.json")).unwrap();
        // Rebuild splits as 4/2/2 regardless of generator defaults.
        let mut all: Vec<Entry> = Vec::new();
        all.append(&mut manifest.splits.train);
        all.append(&mut manifest.splits.val);
        all.append(&mut manifest.splits.test);
        manifest.splits.train = all[..4].to_vec();
        manifest.splits.val = all[4..6].to_vec();
        manifest.splits.test = all[6..8].to_vec();
        let path = dir.join("m2.json");
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let Dataset::Cls(ds) = load_dataset(&path).unwrap() else {
            panic!()
        };
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (4, 2, 2));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn overlapping_splits_rejected() {
        let dir = tmp("overlap");
        materialize(&dir, TaskKind::Classification, 6, 28, 5).unwrap();
        let mut manifest = Manifest::parse(&dir.join("manifest.json")).unwrap();
        let dup = manifest.splits.train[0].clone();
        manifest.splits.val.push(dup);
        let err = manifest.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_data_error_naming_path() {
        let dir = tmp("missing");
        let path = materialize(&dir, TaskKind::Classification, 6, 28, 5).unwrap();
        std::fs::remove_file(dir.join("img/0000.png")).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("0000.png"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tmp("label");
        let path = materialize(&dir, TaskKind::Classification, 6, 28, 5).unwrap();
        let mut manifest = Manifest::parse(&path).unwrap();
        manifest.splits.train[0].label = Some(7);
        let p2 = dir.join("bad.json");
        std::fs::write(&p2, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_dataset(&p2).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn seg_masks_validated_against_n_classes() {
        let dir = tmp("seg");
        let path = materialize(&dir, TaskKind::Segmentation, 6, 32, 5).unwrap();
        let Dataset::Seg(ds) = load_dataset(&path).unwrap() else {
            panic!()
        };
        for mask in ds.train.masks.iter().chain(&ds.val.masks) {
            assert!(mask.iter().all(|&v| v < 2));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loaded_images_stable_across_reads() {
        let dir = tmp("hash");
        let path = materialize(&dir, TaskKind::Classification, 6, 28, 5).unwrap();
        let Dataset::Cls(a) = load_dataset(&path).unwrap() else {
            panic!()
        };
        let Dataset::Cls(b) = load_dataset(&path).unwrap() else {
            panic!()
        };
        for (x, y) in a.train.images.iter().zip(b.train.images.iter()) {
            assert_eq!(x, y);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let dir = tmp("unknown");
        let json = r#"{"task":"classification","n_classes":2,"image_size":28,
            "normalization":{"mean":[0,0,0],"std":[1,1,1]},
            "splits":{"train":[],"val":[],"test":[]},
            "surprise":true}"#;
        let path = dir.join("m.json");
        std::fs::write(&path, json).unwrap();
        let err = Manifest::parse(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
