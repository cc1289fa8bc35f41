//! Classification metrics over integer labels and per-class scores.

use ndarray::ArrayView2;

use crate::{MetricError, Result};

/// Row = truth, column = prediction.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<ndarray::Array2<u64>> {
    if y_true.is_empty() {
        return Err(MetricError::Empty("no samples".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(MetricError::Invalid("label length mismatch".into()));
    }
    let mut cm = ndarray::Array2::<u64>::zeros((n_classes, n_classes));
    for (&t, &p) in y_true.iter().zip(y_pred.iter()) {
        if t >= n_classes || p >= n_classes {
            return Err(MetricError::Invalid(format!(
                "label out of range: truth {t}, pred {p}, n_classes {n_classes}"
            )));
        }
        cm[(t, p)] += 1;
    }
    Ok(cm)
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(MetricError::Empty("no samples".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(MetricError::Invalid("label length mismatch".into()));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Unweighted mean of per-class F1. A class absent from both truth and
/// prediction contributes 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    let per = per_class_f1(y_true, y_pred, n_classes)?;
    Ok(per.iter().sum::<f64>() / n_classes as f64)
}

pub fn per_class_f1(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let cm = confusion_matrix(y_true, y_pred, n_classes)?;
    let mut out = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = cm[(c, c)] as f64;
        let fp = cm.column(c).sum() as f64 - tp;
        let fn_ = cm.row(c).sum() as f64 - tp;
        let denom = 2.0 * tp + fp + fn_;
        out.push(if denom > 0.0 { 2.0 * tp / denom } else { 0.0 });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AucOvr {
    pub value: f64,
    /// Classes with no positives or no negatives, skipped from the average.
    pub skipped: Vec<usize>,
}

/// Macro-averaged one-vs-rest ROC AUC via the Mann-Whitney rank statistic;
/// ties contribute 0.5 through average ranks.
pub fn auc_ovr(y_true: &[usize], scores: ArrayView2<f64>) -> Result<AucOvr> {
    let n = y_true.len();
    if n == 0 {
        return Err(MetricError::Empty("no samples".into()));
    }
    if scores.nrows() != n {
        return Err(MetricError::Invalid("scores/labels length mismatch".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::Invalid("non-finite score".into()));
    }
    let n_classes = scores.ncols();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for c in 0..n_classes {
        let pos = y_true.iter().filter(|&&t| t == c).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            skipped.push(c);
            continue;
        }
        total += binary_auc_ranked(y_true, scores.column(c), c);
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::Invalid(
            "every class lacks positives or negatives".into(),
        ));
    }
    Ok(AucOvr {
        value: total / used as f64,
        skipped,
    })
}

fn binary_auc_ranked(y_true: &[usize], col: ndarray::ArrayView1<f64>, positive: usize) -> f64 {
    let n = y_true.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap());
    // Average ranks over tied groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut npos = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && col[idx[j + 1]] == col[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if y_true[k] == positive {
                rank_sum_pos += avg_rank;
                npos += 1;
            }
        }
        i = j + 1;
    }
    let nneg = n - npos;
    (rank_sum_pos - npos as f64 * (npos as f64 + 1.0) / 2.0) / (npos as f64 * nneg as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions_score_one() {
        let y = vec![0, 1, 2, 1, 0];
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(macro_f1(&y, &y, 3).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_macro_f1() {
        // class 0: tp=1 fp=0 fn=1 -> f1 = 2/3; class 1: tp=2 fp=1 fn=0 -> f1 = 0.8
        let t = vec![0, 0, 1, 1];
        let p = vec![0, 1, 1, 1];
        let per = per_class_f1(&t, &p, 2).unwrap();
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[1] - 0.8).abs() < 1e-12);
        let macro_ = macro_f1(&t, &p, 2).unwrap();
        assert!((macro_ - 11.0 / 15.0).abs() < 1e-12, "{macro_}");
    }

    #[test]
    fn all_wrong_binary_flip_is_zero() {
        let t = vec![0, 0, 1, 1];
        let p = vec![1, 1, 0, 0];
        assert_eq!(macro_f1(&t, &p, 2).unwrap(), 0.0);
    }

    #[test]
    fn absent_class_contributes_zero() {
        let t = vec![0, 0];
        let p = vec![0, 0];
        // class 1 absent everywhere -> f1 0; macro = (1 + 0)/2
        assert!((macro_f1(&t, &p, 2).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn perfectly_ranked_auc_is_one() {
        let t = vec![0, 0, 1, 1];
        let s = array![[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]];
        let a = auc_ovr(&t, s.view()).unwrap();
        assert_eq!(a.value, 1.0);
        assert!(a.skipped.is_empty());
    }

    #[test]
    fn single_class_is_skipped() {
        let t = vec![0, 0];
        let s = array![[0.9, 0.1], [0.8, 0.2]];
        assert!(auc_ovr(&t, s.view()).is_err());
        let t3 = vec![0, 0, 1];
        let s3 = array![[0.9, 0.1, 0.3], [0.8, 0.2, 0.1], [0.2, 0.8, 0.5]];
        let a = auc_ovr(&t3, s3.view()).unwrap();
        assert_eq!(a.skipped, vec![2]);
    }

    #[test]
    fn ties_contribute_half() {
        // All scores equal: AUC must be exactly 0.5.
        let t = vec![0, 1, 0, 1];
        let s = ndarray::Array2::from_elem((4, 2), 0.5);
        let a = auc_ovr(&t, s.view()).unwrap();
        assert!((a.value - 0.5).abs() < 1e-12);
    }
}
