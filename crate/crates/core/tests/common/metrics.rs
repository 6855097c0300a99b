//! Brute-force metric definitions used as oracles.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn counts(scores: &[f64], labels: &[bool], threshold: f64) -> (i128, i128) {
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= threshold).count();
    let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= threshold).count();
    (tp as i128, fp as i128)
}

fn class_sizes(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|l| **l).count();
    (p, labels.len() - p)
}

/// Every positive/negative pair, ties worth half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (p, n) = class_sizes(labels);
    if p == 0 || n == 0 {
        return None;
    }
    let mut twice: u128 = 0;
    for (si, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (sj, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            if si > sj {
                twice += 2;
            } else if si == sj {
                twice += 1;
            }
        }
    }
    Some(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Precision at each distinct threshold weighted by the recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (p, _) = class_sizes(labels);
    if p == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let (tp, fp) = counts(scores, labels, t);
        let recall = tp as f64 / p as f64;
        if tp > 0 {
            area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        }
        prev_recall = recall;
    }
    Some(area)
}

/// Best `TPR - FPR` over midpoints of adjacent distinct scores, lowest threshold on ties.
pub fn youden(scores: &[f64], labels: &[bool]) -> Option<(f64, f64)> {
    let (p, n) = class_sizes(labels);
    if p == 0 || n == 0 {
        return None;
    }
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() == 1 {
        return Some((distinct[0], 0.0));
    }
    let mut best: Option<(i128, f64)> = None;
    for w in distinct.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let (tp, fp) = counts(scores, labels, t);
        let j = tp * n as i128 - fp * p as i128;
        // ascending scan: strict improvement keeps the lowest threshold
        if best.is_none_or(|(bj, _)| j > bj) {
            best = Some((j, t));
        }
    }
    let (j, t) = best?;
    Some((t, j as f64 / (p as f64 * n as f64)))
}

fn bleu_words(text: &str) -> Vec<String> {
    let cleaned: String = text.chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c.to_ascii_lowercase() }).collect();
    cleaned.split_whitespace().map(String::from).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

fn modified_precision(c: &[String], r: &[String], n: usize) -> f64 {
    let cc = ngram_counts(c, n);
    let rc = ngram_counts(r, n);
    let total: usize = cc.values().sum();
    if total == 0 {
        return if r.len() < n { 1.0 } else { 0.0 };
    }
    let hits: usize = cc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum();
    hits as f64 / total as f64
}

/// BLEU with unigram and bigram precision; `None` for an empty candidate.
/// Texts are expected to be ASCII without punctuation inside words.
pub fn bleu2(candidate: &str, reference: &str) -> Option<f64> {
    let c = bleu_words(candidate);
    let r = bleu_words(reference);
    if c.is_empty() {
        return None;
    }
    let p1 = modified_precision(&c, &r, 1);
    let p2 = modified_precision(&c, &r, 2);
    let bp = if c.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    Some(bp * (p1 * p2).sqrt())
}

/// Per-class (tp, fp, fn) and precision/recall/F1 with the empty-denominator convention.
pub fn class_f1(pred: &[Vec<String>], truth: &[Vec<String>], class: &str) -> ([usize; 3], [f64; 3]) {
    let mut c = [0usize; 3];
    for (p, t) in pred.iter().zip(truth) {
        let (ip, it) = (p.iter().any(|x| x == class), t.iter().any(|x| x == class));
        if ip && it {
            c[0] += 1;
        } else if ip {
            c[1] += 1;
        } else if it {
            c[2] += 1;
        }
    }
    let [tp, fp, fn_] = c;
    let precision = if tp + fp == 0 {
        if fn_ == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        if fp == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (c, [precision, recall, f1])
}

/// Scores on a 1/8 grid so that midpoints are exact.
pub fn random_binary(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let len = rng.random_range(2..12);
    let levels = rng.random_range(1..9);
    let scores = (0..len).map(|_| rng.random_range(0..levels) as f64 / 8.0).collect();
    let labels = (0..len).map(|_| rng.random_bool(0.5)).collect();
    (scores, labels)
}

const WORDS: [&str; 6] = ["no", "small", "left", "effusion", "edema", "is"];

pub fn random_text(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let len = rng.random_range(0..=max_len);
    let mut out: Vec<String> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    if len > 0 && rng.random_bool(0.3) {
        out[0] = out[0].to_uppercase();
        out.last_mut().unwrap().push('.');
    }
    out.join(" ")
}

pub fn random_labels(rng: &mut ChaCha8Rng, classes: &[String], n: usize) -> Vec<Vec<String>> {
    (0..n)
        .map(|_| classes.iter().filter(|_| rng.random_bool(0.35)).cloned().collect())
        .collect()
}
