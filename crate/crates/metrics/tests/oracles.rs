//! Brute-force oracle equivalence on randomized small instances, plus
//! ordering-invariance properties.

use ndarray::Array2;
use radenc_core::rng::Rng;
use radenc_metrics::{accuracy, auc_ovr, bleu, macro_f1, rouge_l, seg_metrics};

// --- independent oracles ----------------------------------------------------

/// Per-class F1 from raw counting loops, no confusion matrix.
fn macro_f1_oracle(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..n_classes {
        let tp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(&t, &p)| t == c && p == c)
            .count() as f64;
        let fp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(&t, &p)| t != c && p == c)
            .count() as f64;
        let fn_ = y_true
            .iter()
            .zip(y_pred)
            .filter(|(&t, &p)| t == c && p != c)
            .count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    sum / n_classes as f64
}

/// Binary AUC by enumerating every positive/negative pair.
fn auc_pair_oracle(labels: &[bool], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// IoU/Dice by direct set counting per class.
fn seg_oracle(pred: &Array2<u8>, truth: &Array2<u8>, n_classes: usize) -> (f64, f64) {
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut present = 0;
    for c in 0..n_classes as u8 {
        let a: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let b: Vec<bool> = truth.iter().map(|&v| v == c).collect();
        let na = a.iter().filter(|&&v| v).count();
        let nb = b.iter().filter(|&&v| v).count();
        if na + nb == 0 {
            continue;
        }
        present += 1;
        let inter = a.iter().zip(&b).filter(|(&x, &y)| x && y).count() as f64;
        let union = (na + nb) as f64 - inter;
        iou_sum += inter / union;
        dice_sum += 2.0 * inter / (na + nb) as f64;
    }
    (iou_sum / present as f64, dice_sum / present as f64)
}

/// Recursive memoized LCS, structurally different from the DP row solver.
fn lcs_recursive(a: &[u32], b: &[u32]) -> usize {
    fn go(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

// --- randomized equivalence -------------------------------------------------

#[test]
fn macro_f1_matches_oracle_on_random_instances() {
    let mut rng = Rng::seed_from(101);
    for _ in 0..300 {
        let n = 1 + rng.below(8);
        let classes = 2 + rng.below(2); // 2..=3
        let t: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let got = macro_f1(&t, &p, classes).unwrap();
        let want = macro_f1_oracle(&t, &p, classes);
        assert!((got - want).abs() < 1e-12, "t {t:?} p {p:?}");
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = Rng::seed_from(202);
    for case in 0..300 {
        let n = 4 + rng.below(12);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        if labels.iter().all(|&l| l) {
            labels[0] = false;
        }
        if labels.iter().all(|&l| !l) {
            labels[0] = true;
        }
        // Quantized scores to exercise ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(5) as f64) / 4.0).collect();
        let y: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        let mut mat = Array2::zeros((n, 2));
        for (i, &s) in scores.iter().enumerate() {
            mat[(i, 1)] = s;
            mat[(i, 0)] = -s;
        }
        let got = auc_ovr(&y, mat.view()).unwrap().value;
        // Macro over both columns: class 1 uses `scores`, class 0 uses -scores.
        let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
        let flip: Vec<bool> = labels.iter().map(|&l| !l).collect();
        let want = (auc_pair_oracle(&labels, &scores) + auc_pair_oracle(&flip, &neg)) / 2.0;
        assert!((got - want).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn four_sample_binary_case_exact_pairs() {
    let y = vec![1, 0, 1, 0];
    let scores = [0.7, 0.7, 0.2, 0.1];
    let mut mat = Array2::zeros((4, 2));
    for (i, &s) in scores.iter().enumerate() {
        mat[(i, 1)] = s;
        mat[(i, 0)] = 1.0 - s;
    }
    // Pairs for class 1: (0.7 vs 0.7 -> 0.5), (0.7 vs 0.1 -> 1), (0.2 vs 0.7 -> 0), (0.2 vs 0.1 -> 1)
    let labels = [true, false, true, false];
    let want1 = auc_pair_oracle(&labels, &scores);
    assert!((want1 - 2.5 / 4.0).abs() < 1e-12);
    let got = auc_ovr(&y, mat.view()).unwrap().value;
    let flip: Vec<bool> = labels.iter().map(|&l| !l).collect();
    let neg: Vec<f64> = scores.iter().map(|&s| 1.0 - s).collect();
    let want = (want1 + auc_pair_oracle(&flip, &neg)) / 2.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn seg_matches_set_counting() {
    let mut rng = Rng::seed_from(303);
    for _ in 0..300 {
        let h = 1 + rng.below(4);
        let w = 1 + rng.below(4);
        let classes = 2 + rng.below(2);
        let pred = Array2::from_shape_fn((h, w), |_| rng.below(classes) as u8);
        let truth = Array2::from_shape_fn((h, w), |_| rng.below(classes) as u8);
        let got = seg_metrics(pred.view(), truth.view(), classes).unwrap();
        let (miou, dice) = seg_oracle(&pred, &truth, classes);
        assert!((got.miou - miou).abs() < 1e-12);
        assert!((got.dice - dice).abs() < 1e-12);
    }
}

#[test]
fn bleu_matches_independent_recount() {
    let mut rng = Rng::seed_from(404);
    let vocab = ["a", "b", "c", "d"];
    for _ in 0..300 {
        let hl = 1 + rng.below(8);
        let rl = 1 + rng.below(8);
        let hyp: Vec<&str> = (0..hl).map(|_| vocab[rng.below(4)]).collect();
        let rf: Vec<&str> = (0..rl).map(|_| vocab[rng.below(4)]).collect();
        let got = bleu(&hyp, std::slice::from_ref(&rf), 2);

        // Oracle: recount unigram/bigram clipped matches with explicit loops.
        let mut want = [0.0f64; 2];
        for n in 1..=2usize {
            if hyp.len() < n {
                want[n - 1] = 0.0;
                continue;
            }
            let hgrams: Vec<&[&str]> = hyp.windows(n).collect();
            let rgrams: Vec<&[&str]> = if rf.len() >= n { rf.windows(n).collect() } else { vec![] };
            let mut clipped = 0usize;
            let mut seen: Vec<&[&str]> = Vec::new();
            for g in &hgrams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let hc = hgrams.iter().filter(|x| x == &g).count();
                let rc = rgrams.iter().filter(|x| x == &g).count();
                clipped += hc.min(rc);
            }
            want[n - 1] = 100.0 * clipped as f64 / hgrams.len() as f64;
        }
        assert!((got.by_n[0] - want[0]).abs() < 1e-9);
        assert!((got.by_n[1] - want[1]).abs() < 1e-9);
    }
}

#[test]
fn rouge_matches_recursive_lcs() {
    let mut rng = Rng::seed_from(505);
    for _ in 0..300 {
        let a: Vec<u32> = (0..1 + rng.below(9)).map(|_| rng.below(4) as u32).collect();
        let b: Vec<u32> = (0..1 + rng.below(9)).map(|_| rng.below(4) as u32).collect();
        let lcs = lcs_recursive(&a, &b) as f64;
        let want = if lcs == 0.0 {
            0.0
        } else {
            let p = lcs / a.len() as f64;
            let r = lcs / b.len() as f64;
            100.0 * (1.0 + 1.44) * p * r / (r + 1.44 * p)
        };
        assert!((rouge_l(&a, &b) - want).abs() < 1e-9);
    }
}

// --- ordering invariance ----------------------------------------------------

#[test]
fn metrics_invariant_to_sample_order() {
    let mut rng = Rng::seed_from(606);
    for _ in 0..50 {
        let n = 5 + rng.below(10);
        let classes = 3;
        let t: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let scores = Array2::from_shape_fn((n, classes), |_| rng.f64());
        let mut t_ok = t.clone();
        if !t_ok.contains(&0) {
            t_ok[0] = 0;
        }
        if !t_ok.contains(&1) {
            t_ok[1 % n] = 1;
        }
        if !t_ok.contains(&2) {
            t_ok[2 % n] = 2;
        }

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let t2: Vec<usize> = perm.iter().map(|&i| t_ok[i]).collect();
        let p2: Vec<usize> = perm.iter().map(|&i| p[i]).collect();
        let scores2 = Array2::from_shape_fn((n, classes), |(i, j)| scores[(perm[i], j)]);

        assert_eq!(
            accuracy(&t_ok, &p).unwrap(),
            accuracy(&t2, &p2).unwrap()
        );
        assert!(
            (macro_f1(&t_ok, &p, classes).unwrap() - macro_f1(&t2, &p2, classes).unwrap()).abs()
                < 1e-12
        );
        let a1 = auc_ovr(&t_ok, scores.view()).unwrap().value;
        let a2 = auc_ovr(&t2, scores2.view()).unwrap().value;
        assert!((a1 - a2).abs() < 1e-12);
    }
}

#[test]
fn self_bleu_is_100_for_any_hypothesis_of_length_4_plus() {
    let mut rng = Rng::seed_from(808);
    let vocab = ["w0", "w1", "w2", "w3", "w4"];
    for _ in 0..200 {
        let len = 4 + rng.below(10);
        let h: Vec<&str> = (0..len).map(|_| vocab[rng.below(5)]).collect();
        let s = bleu(&h, &[h.clone()], 4);
        assert_eq!(s.bleu, 100.0);
        assert_eq!(s.by_n, [100.0; 4]);
    }
}

#[test]
fn random_scores_auc_near_half() {
    let mut rng = Rng::seed_from(707);
    let n = 4000;
    let y: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
    let scores = Array2::from_shape_fn((n, 2), |_| rng.f64());
    let a = auc_ovr(&y, scores.view()).unwrap().value;
    assert!((a - 0.5).abs() < 0.03, "auc {a}");
}
