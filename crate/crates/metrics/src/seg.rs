//! Segmentation overlap metrics. Per-class IoU = |A∩B| / |A∪B| and
//! Dice = 2|A∩B| / (|A|+|B|), macro-averaged over classes present in either
//! mask; pixel-F1 comes from the pixel confusion counts with the same
//! class convention.

use ndarray::ArrayView2;

use crate::{MetricError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub miou: f64,
    pub dice: f64,
    pub f1: f64,
}

/// Per-class intersection / prediction / truth pixel counts.
#[derive(Debug, Clone, Default)]
pub struct SegAccumulator {
    inter: Vec<u64>,
    pred: Vec<u64>,
    truth: Vec<u64>,
}

impl SegAccumulator {
    pub fn new(n_classes: usize) -> Self {
        SegAccumulator {
            inter: vec![0; n_classes],
            pred: vec![0; n_classes],
            truth: vec![0; n_classes],
        }
    }

    pub fn add(&mut self, pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(MetricError::Invalid(format!(
                "mask shape mismatch: {:?} vs {:?}",
                pred.dim(),
                truth.dim()
            )));
        }
        let n = self.inter.len();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(MetricError::Invalid(format!(
                    "mask label out of range: pred {p}, truth {t}, n_classes {n}"
                )));
            }
            self.pred[p] += 1;
            self.truth[t] += 1;
            if p == t {
                self.inter[p] += 1;
            }
        }
        Ok(())
    }

    pub fn finalize(&self) -> Result<SegScores> {
        let n = self.inter.len();
        let mut iou_sum = 0.0;
        let mut dice_sum = 0.0;
        let mut f1_sum = 0.0;
        let mut present = 0usize;
        for c in 0..n {
            let inter = self.inter[c] as f64;
            let a = self.pred[c] as f64;
            let b = self.truth[c] as f64;
            if a + b == 0.0 {
                continue; // class absent from both masks
            }
            present += 1;
            let union = a + b - inter;
            iou_sum += inter / union;
            dice_sum += 2.0 * inter / (a + b);
            // precision = inter/a, recall = inter/b from the pixel confusion counts
            let precision = if a > 0.0 { inter / a } else { 0.0 };
            let recall = if b > 0.0 { inter / b } else { 0.0 };
            f1_sum += if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
        }
        if present == 0 {
            return Err(MetricError::Empty("no labeled pixels".into()));
        }
        Ok(SegScores {
            miou: iou_sum / present as f64,
            dice: dice_sum / present as f64,
            f1: f1_sum / present as f64,
        })
    }
}

/// Metrics for a single mask pair.
pub fn seg_metrics(
    pred: ArrayView2<u8>,
    truth: ArrayView2<u8>,
    n_classes: usize,
) -> Result<SegScores> {
    let mut acc = SegAccumulator::new(n_classes);
    acc.add(pred, truth)?;
    acc.finalize()
}
