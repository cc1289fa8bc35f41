//! BLEU (modified n-gram precision with clipping, geometric mean, brevity
//! penalty) and ROUGE-L (LCS F-measure). Scores are reported x100. A zero
//! n-gram count zeroes the geometric-mean component: no additive smoothing.

use std::collections::HashMap;
use std::hash::Hash;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScores {
    /// Composite: brevity penalty times the geometric mean of p_1..p_max_n.
    pub bleu: f64,
    /// Individual modified precisions p_n (x100), without brevity penalty.
    pub by_n: [f64; 4],
    pub brevity_penalty: f64,
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut map = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *map.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

/// Per-order clipped match and total counts for one hypothesis against its
/// references, plus hypothesis length and the closest reference length.
#[derive(Debug, Clone, Default)]
pub struct BleuAccumulator {
    matched: [u64; 4],
    total: [u64; 4],
    hyp_len: u64,
    ref_len: u64,
    max_n: usize,
}

impl BleuAccumulator {
    pub fn new(max_n: usize) -> Self {
        assert!((1..=4).contains(&max_n));
        BleuAccumulator {
            max_n,
            ..Default::default()
        }
    }

    pub fn add<T: Eq + Hash + Clone>(&mut self, hyp: &[T], refs: &[Vec<T>]) {
        self.hyp_len += hyp.len() as u64;
        // Closest reference length; ties resolved toward the shorter one.
        if let Some(r) = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        {
            self.ref_len += r as u64;
        }
        for n in 1..=self.max_n {
            let hc = ngram_counts(hyp, n);
            let mut clipped = 0u64;
            for (gram, &count) in &hc {
                let max_ref = refs
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += count.min(max_ref);
            }
            self.matched[n - 1] += clipped;
            self.total[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
        }
    }

    pub fn finalize(&self) -> BleuScores {
        let mut by_n = [0.0; 4];
        let mut log_sum = 0.0;
        let mut any_zero = false;
        for n in 0..self.max_n {
            let p = if self.total[n] > 0 {
                self.matched[n] as f64 / self.total[n] as f64
            } else {
                0.0
            };
            by_n[n] = 100.0 * p;
            if p > 0.0 {
                log_sum += p.ln();
            } else {
                any_zero = true;
            }
        }
        let bp = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let bleu = if any_zero || self.hyp_len == 0 {
            0.0
        } else {
            100.0 * bp * (log_sum / self.max_n as f64).exp()
        };
        BleuScores {
            bleu,
            by_n,
            brevity_penalty: bp,
        }
    }
}

/// Sentence-level BLEU of one hypothesis against one or more references.
pub fn bleu<T: Eq + Hash + Clone>(hyp: &[T], refs: &[Vec<T>], max_n: usize) -> BleuScores {
    let mut acc = BleuAccumulator::new(max_n);
    acc.add(hyp, refs);
    acc.finalize()
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by beta = 1.2, reported x100.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() || hyp.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let beta2 = 1.2f64 * 1.2;
    100.0 * (1.0 + beta2) * p * r / (r + beta2 * p)
}
