//! Per-item answer metrics. All scores lie in [0, 1].

use std::collections::HashMap;

/// F-measure weight for ROUGE-L (recall weighted 1.2x).
pub const ROUGE_L_BETA: f64 = 1.2;

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn em_at_1(prediction: &str, references: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if references.iter().any(|r| normalize_answer(r) == p) {
        1.0
    } else {
        0.0
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best LCS-based F-measure over the references.
pub fn rouge_l(prediction: &str, references: &[String]) -> f64 {
    let pred = tokens(prediction);
    if pred.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    references
        .iter()
        .map(|r| {
            let reference = tokens(r);
            if reference.is_empty() {
                return 0.0;
            }
            let l = lcs_len(&pred, &reference) as f64;
            let p = l / pred.len() as f64;
            let rc = l / reference.len() as f64;
            if p == 0.0 && rc == 0.0 {
                0.0
            } else {
                (1.0 + b2) * p * rc / (rc + b2 * p)
            }
        })
        .fold(0.0, f64::max)
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU up to order `n` (1..=4): clipped n-gram precisions, uniform
/// geometric mean, brevity penalty against the closest reference length.
/// Orders longer than the prediction are left out of the mean; any included
/// order with zero matches makes the score 0 (no smoothing).
pub fn bleu_n(prediction: &str, references: &[String], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let pred = tokens(prediction);
    if pred.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    let orders = n.min(pred.len());
    let mut log_sum = 0.0;
    for k in 1..=orders {
        let cand = ngram_counts(&pred, k);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = pred.len() + 1 - k;
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = pred.len();
    // closest reference length, shorter on ties
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}
