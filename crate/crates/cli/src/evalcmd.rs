//! `eval` subcommand: score prediction files against references and emit a
//! JSON metrics report.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use radenc_core::error::{Error, Result};
use radenc_data::png_io::read_png_mask;
use radenc_metrics::{accuracy, auc_ovr, macro_f1, rouge_l, BleuAccumulator, SegAccumulator};
use serde_json::{json, Value};

/// Masks matched by filename between two directories.
pub fn eval_seg(pred_dir: &Path, truth_dir: &Path, n_classes: usize) -> Result<Value> {
    let mut names: Vec<String> = std::fs::read_dir(truth_dir)
        .map_err(|e| Error::data(format!("truth dir `{}`: {e}", truth_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::data("truth directory holds no .png masks"));
    }
    let mut acc = SegAccumulator::new(n_classes);
    for name in &names {
        let truth = read_png_mask(&truth_dir.join(name))?;
        let pred = read_png_mask(&pred_dir.join(name))?;
        acc.add(pred.view(), truth.view())
            .map_err(|e| Error::data(e.to_string()))?;
    }
    let scores = acc.finalize().map_err(|e| Error::data(e.to_string()))?;
    Ok(json!({
        "task": "seg",
        "n_images": names.len(),
        "n_classes": n_classes,
        "miou": scores.miou,
        "dice": scores.dice,
        "f1": scores.f1,
    }))
}

fn parse_cls_csv(path: &Path) -> Result<BTreeMap<String, (usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("`{}`: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("id,")) {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .ok_or_else(|| Error::data(format!("line {}: missing id", lineno + 1)))?
            .to_string();
        let label: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::data(format!("line {}: missing label", lineno + 1)))?;
        let scores: Vec<f64> = parts.filter_map(|s| s.trim().parse().ok()).collect();
        out.insert(id, (label, scores));
    }
    if out.is_empty() {
        return Err(Error::data(format!("`{}` holds no rows", path.display())));
    }
    Ok(out)
}

/// CSV rows `id,label[,score_0..score_k]`, matched on id. AUC appears only
/// when every prediction carries a full score row.
pub fn eval_cls(pred_csv: &Path, truth_csv: &Path, n_classes: usize) -> Result<Value> {
    let truth = parse_cls_csv(truth_csv)?;
    let pred = parse_cls_csv(pred_csv)?;
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for (id, (label, _)) in &truth {
        let Some((plabel, pscores)) = pred.get(id) else {
            return Err(Error::data(format!("prediction missing for id `{id}`")));
        };
        y_true.push(*label);
        y_pred.push(*plabel);
        scores.push(pscores.clone());
    }
    let acc = accuracy(&y_true, &y_pred).map_err(|e| Error::data(e.to_string()))?;
    let f1 = macro_f1(&y_true, &y_pred, n_classes).map_err(|e| Error::data(e.to_string()))?;
    let auc = if scores.iter().all(|s| s.len() == n_classes) {
        let mut mat = Array2::zeros((scores.len(), n_classes));
        for (i, row) in scores.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                mat[(i, j)] = v;
            }
        }
        auc_ovr(&y_true, mat.view()).ok().map(|a| a.value)
    } else {
        None
    };
    Ok(json!({
        "task": "cls",
        "n": y_true.len(),
        "n_classes": n_classes,
        "acc": acc,
        "f1": f1,
        "auc": auc,
    }))
}

fn parse_jsonl_captions(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("`{}`: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("line {}: {e}", lineno + 1)))?;
        let image = v
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::data(format!("line {}: missing `image`", lineno + 1)))?;
        let caption = v
            .get("caption")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::data(format!("line {}: missing `caption`", lineno + 1)))?;
        out.insert(image.to_string(), caption.to_string());
    }
    if out.is_empty() {
        return Err(Error::data(format!("`{}` holds no rows", path.display())));
    }
    Ok(out)
}

/// JSON-lines `{image, caption}` prediction/reference pairs matched on image.
pub fn eval_cap(pred_jsonl: &Path, refs_jsonl: &Path) -> Result<Value> {
    let refs = parse_jsonl_captions(refs_jsonl)?;
    let preds = parse_jsonl_captions(pred_jsonl)?;
    let mut bleu_acc = BleuAccumulator::new(4);
    let mut rouge_sum = 0.0;
    let mut n = 0usize;
    for (image, reference) in &refs {
        let Some(hyp) = preds.get(image) else {
            return Err(Error::data(format!("prediction missing for image `{image}`")));
        };
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        bleu_acc.add(&h, std::slice::from_ref(&r));
        rouge_sum += rouge_l(&h, &r);
        n += 1;
    }
    let bleu = bleu_acc.finalize();
    Ok(json!({
        "task": "cap",
        "n": n,
        "bleu": bleu.bleu,
        "bleu_1": bleu.by_n[0],
        "bleu_2": bleu.by_n[1],
        "bleu_3": bleu.by_n[2],
        "bleu_4": bleu.by_n[3],
        "rouge_l": rouge_sum / n as f64,
    }))
}
