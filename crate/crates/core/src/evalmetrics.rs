//! Classification, text and clinical-efficacy metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::textpipe::{detect_prior_reference, split_sentences, words};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric needs both positive and negative examples")]
    SingleClass,
    #[error("metric needs at least one positive example")]
    NoPositives,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("candidate text has no tokens")]
    EmptyCandidate,
    #[error("class {class} outside [0, {k})")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
}

/// Parallel score/label lists.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl BinaryScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::Length(scores.len(), labels.len()));
        }
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        Ok(BinaryScores { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both(&self) -> Result<(usize, usize), MetricError> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(MetricError::SingleClass);
        }
        Ok((p, n))
    }

    /// Groups of tied scores, in descending score order, as (positives, negatives, score).
    fn tie_groups_desc(&self) -> Vec<(usize, usize, f64)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(usize, usize, f64)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            match groups.last_mut() {
                Some(g) if g.2 == s => {}
                _ => groups.push((0, 0, s)),
            }
            let g = groups.last_mut().expect("just pushed");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Probability that a random positive outranks a random negative, ties counting half.
pub fn roc_auc(s: &BinaryScores) -> Result<f64, MetricError> {
    let (p, n) = s.require_both()?;
    // twice the Mann-Whitney statistic, accumulated in integers
    let mut twice: u128 = 0;
    let mut negatives_below = s.negatives() as u128;
    for (gp, gn, _) in s.tie_groups_desc() {
        negatives_below -= gn as u128;
        twice += gp as u128 * (2 * negatives_below + gn as u128);
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Step-interpolated area under the precision-recall curve: each distinct
/// score threshold contributes its precision times the recall it adds.
pub fn pr_auc(s: &BinaryScores) -> Result<f64, MetricError> {
    let p = s.positives();
    if p == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (gp, gn, _) in s.tie_groups_desc() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            area += (gp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// Threshold maximizing `TPR − FPR` among midpoints between consecutive distinct
/// scores (predict positive when `score ≥ threshold`); ties go to the lowest
/// threshold. A single distinct score yields that score with `J = 0`.
pub fn youden_threshold(s: &BinaryScores) -> Result<(f64, f64), MetricError> {
    let (p, n) = s.require_both()?;
    let groups = s.tie_groups_desc();
    if groups.len() == 1 {
        return Ok((groups[0].2, 0.0));
    }
    let (mut tp, mut fp) = (0i128, 0i128);
    let mut best: Option<(i128, f64)> = None;
    for w in groups.windows(2) {
        tp += w[0].0 as i128;
        fp += w[0].1 as i128;
        let j = tp * n as i128 - fp * p as i128;
        let threshold = w[0].2 + (w[1].2 - w[0].2) / 2.0;
        // thresholds decrease along the scan, so `>=` keeps the lowest among ties
        if best.is_none_or(|(bj, _)| j >= bj) {
            best = Some((j, threshold));
        }
    }
    let (j, t) = best.expect("at least two groups");
    Ok((t, j as f64 / (p as f64 * n as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][pred]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: usize = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Length(pred.len(), truth.len()));
    }
    let mut counts = vec![vec![0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        for c in [p, t] {
            if c >= k {
                return Err(MetricError::ClassOutOfRange { class: c, k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Positive rate of the class in the training data, when known.
    pub train_frequency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficacyTable {
    pub classes: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl EfficacyTable {
    pub fn with_frequencies(mut self, freq: &[f64]) -> Result<Self, MetricError> {
        if freq.len() != self.classes.len() {
            return Err(MetricError::Length(freq.len(), self.classes.len()));
        }
        for (c, f) in self.classes.iter_mut().zip(freq) {
            c.train_frequency = Some(*f);
        }
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,tp,fp,fn,train_frequency\n");
        for c in &self.classes {
            let freq = c.train_frequency.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{freq}",
                c.name, c.precision, c.recall, c.f1, c.true_positives, c.false_positives, c.false_negatives
            );
        }
        let _ = writeln!(out, "macro,{},{},{},,,,", self.macro_precision, self.macro_recall, self.macro_f1);
        out
    }

    /// Pearson correlation between per-class precision and training frequency.
    pub fn precision_frequency_correlation(&self) -> Option<f64> {
        let (p, f): (Vec<f64>, Vec<f64>) = self
            .classes
            .iter()
            .filter_map(|c| c.train_frequency.map(|f| (c.precision, f)))
            .unzip();
        pearson(&p, &f)
    }
}

/// Ratio with the convention that an empty denominator scores 1 when there
/// was nothing to get wrong (`miss == 0`) and 0 otherwise.
fn ratio(hit: usize, denom: usize, miss: usize) -> f64 {
    if denom > 0 {
        hit as f64 / denom as f64
    } else if miss == 0 {
        1.0
    } else {
        0.0
    }
}

/// Per-class precision/recall/F1 over multilabel predictions and their unweighted means.
pub fn macro_f1<S: AsRef<str>>(pred: &[Vec<S>], truth: &[Vec<S>], classes: &[String]) -> Result<EfficacyTable, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() || classes.is_empty() {
        return Err(MetricError::Empty);
    }
    let has = |set: &[S], c: &str| set.iter().any(|x| x.as_ref() == c);
    let rows: Vec<ClassScores> = classes
        .iter()
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, t) in pred.iter().zip(truth) {
                match (has(p, c), has(t, c)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let precision = ratio(tp, tp + fp, fn_);
            let recall = ratio(tp, tp + fn_, fp);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                name: c.clone(),
                precision,
                recall,
                f1,
                true_positives: tp,
                false_positives: fp,
                false_negatives: fn_,
                train_frequency: None,
            }
        })
        .collect();
    let k = rows.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| rows.iter().map(f).sum::<f64>() / k;
    Ok(EfficacyTable {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes: rows,
    })
}

/// Lowercased whitespace tokens with ASCII punctuation removed.
fn bleu_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn clipped_matches<T: std::hash::Hash + Eq>(cand: Vec<T>, reference: Vec<T>) -> (usize, usize) {
    let total = cand.len();
    let mut budget: HashMap<T, usize> = HashMap::new();
    for g in reference {
        *budget.entry(g).or_default() += 1;
    }
    let mut hits = 0;
    for g in cand {
        if let Some(b) = budget.get_mut(&g).filter(|b| **b > 0) {
            *b -= 1;
            hits += 1;
        }
    }
    (hits, total)
}

/// Single-reference BLEU with unigram and bigram precision, no smoothing.
/// A one-token candidate has no bigrams; its bigram precision counts as 1
/// only when the reference has no bigrams either.
pub fn bleu2(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    let c = bleu_tokens(candidate);
    let r = bleu_tokens(reference);
    if c.is_empty() {
        return Err(MetricError::EmptyCandidate);
    }
    let (h1, t1) = clipped_matches(c.iter().collect(), r.iter().collect());
    let p1 = h1 as f64 / t1 as f64;
    let p2 = if c.len() < 2 {
        if r.len() < 2 {
            1.0
        } else {
            0.0
        }
    } else {
        let (h2, t2) = clipped_matches(c.windows(2).collect(), r.windows(2).collect());
        h2 as f64 / t2 as f64
    };
    if p1 == 0.0 || p2 == 0.0 {
        return Ok(0.0);
    }
    let bp = (1.0 - r.len() as f64 / c.len() as f64).exp().min(1.0);
    Ok(bp * (p1 * p2).sqrt())
}

/// Phrase and negation-cue lists for rule-based report labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLexicon {
    pub classes: Vec<String>,
    /// Positive phrases per class, each a lowercase token sequence.
    pub phrases: Vec<Vec<Vec<String>>>,
    pub negation_cues: Vec<Vec<String>>,
    /// Maximum distance, in tokens, from the start of a cue to a negated phrase.
    pub window: usize,
}

pub const DEFAULT_NEGATION_CUES: [&str; 3] = ["no", "without", "free of"];
pub const NEGATION_WINDOW: usize = 4;

fn phrase_tokens(p: &str) -> Vec<String> {
    words(p).into_iter().filter(|w| !w.chars().all(|c| c.is_ascii_punctuation())).collect()
}

impl LabelLexicon {
    pub fn new(classes: Vec<String>, phrases: Vec<Vec<String>>, cues: &[&str]) -> Result<Self, MetricError> {
        if classes.len() != phrases.len() {
            return Err(MetricError::Length(classes.len(), phrases.len()));
        }
        for list in &phrases {
            for p in list {
                if p.is_empty() || *p != p.to_lowercase() {
                    return Err(MetricError::Lexicon(format!("phrase {p:?} must be non-empty lowercase")));
                }
            }
        }
        for (i, a) in phrases.iter().enumerate() {
            for (j, b) in phrases.iter().enumerate() {
                if i != j && a.iter().any(|pa| b.iter().any(|pb| pb.contains(pa.as_str()))) {
                    return Err(MetricError::Lexicon(format!("a phrase of {} occurs inside a phrase of {}", classes[i], classes[j])));
                }
            }
        }
        Ok(LabelLexicon {
            classes,
            phrases: phrases.iter().map(|l| l.iter().map(|p| phrase_tokens(p)).collect()).collect(),
            negation_cues: cues.iter().map(|c| phrase_tokens(c)).collect(),
            window: NEGATION_WINDOW,
        })
    }

    /// Each class matched by its own name, with the default negation cues.
    pub fn for_classes(classes: &[String]) -> Result<Self, MetricError> {
        Self::new(classes.to_vec(), classes.iter().map(|c| vec![c.clone()]).collect(), &DEFAULT_NEGATION_CUES)
    }
}

fn occurrences(tokens: &[String], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - phrase.len()).filter(|&i| tokens[i..i + phrase.len()] == *phrase).collect()
}

/// Classes with at least one non-negated mention. Within a sentence a mention is
/// negated when a cue starts before it and at most `window` tokens earlier.
pub fn lexicon_label(text: &str, lexicon: &LabelLexicon) -> Vec<String> {
    let sentences: Vec<Vec<String>> = split_sentences(text).iter().map(|s| phrase_tokens(s)).collect();
    let cue_starts: Vec<Vec<usize>> = sentences
        .iter()
        .map(|toks| lexicon.negation_cues.iter().flat_map(|c| occurrences(toks, c)).collect())
        .collect();
    lexicon
        .classes
        .iter()
        .zip(&lexicon.phrases)
        .filter(|(_, phrases)| {
            sentences.iter().zip(&cue_starts).any(|(toks, cues)| {
                phrases.iter().flat_map(|p| occurrences(toks, p)).any(|at| !cues.iter().any(|&c| c < at && at - c <= lexicon.window))
            })
        })
        .map(|(c, _)| c.clone())
        .collect()
}

/// Lexicon labels of each generated report scored against ground truth.
pub fn clinical_efficacy<S: AsRef<str>>(generated: &[S], truth: &[Vec<String>], lexicon: &LabelLexicon) -> Result<EfficacyTable, MetricError> {
    if generated.len() != truth.len() {
        return Err(MetricError::Length(generated.len(), truth.len()));
    }
    let pred: Vec<Vec<String>> = generated.iter().map(|g| lexicon_label(g.as_ref(), lexicon)).collect();
    macro_f1(&pred, truth, &lexicon.classes)
}

/// Fraction of reports that mention a prior study.
pub fn hallucination_rate<S: AsRef<str>>(reports: &[S]) -> Result<f64, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = reports.iter().filter(|r| detect_prior_reference(r.as_ref())).count();
    Ok(hits as f64 / reports.len() as f64)
}

/// Sample Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test over matched (per-seed) measurements.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::Empty);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(TTest { t, df, p_value: p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    Ok(TTest {
        t,
        df,
        p_value: 1.0 - dist.cdf(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bs(s: &[f64], l: &[u8]) -> BinaryScores {
        BinaryScores::new(s.to_vec(), l.iter().map(|&x| x == 1).collect()).unwrap()
    }

    fn set(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&bs(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&bs(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&bs(&[0.1, 0.4, 0.35, 0.8], &[1, 1, 0, 0])).unwrap(), 0.25);
        assert_eq!(roc_auc(&bs(&[0.5, 0.5], &[0, 1])).unwrap(), 0.5);
        assert_eq!(roc_auc(&bs(&[0.5, 0.5], &[1, 1])), Err(MetricError::SingleClass));
    }

    #[test]
    fn pr_auc_examples() {
        assert_eq!(pr_auc(&bs(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(pr_auc(&bs(&[0.3; 5], &[1, 0, 0, 1, 0])).unwrap(), 0.4);
        assert_eq!(pr_auc(&bs(&[0.3, 0.2], &[0, 0])), Err(MetricError::NoPositives));
    }

    #[test]
    fn youden_examples() {
        let (t, j) = youden_threshold(&bs(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap();
        assert_eq!((t, j), (0.5, 1.0));
        assert_eq!(youden_threshold(&bs(&[0.4; 4], &[0, 1, 0, 1])).unwrap(), (0.4, 0.0));
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 2, 2, 1], &[0, 1, 2, 1, 1], 3).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 2, 1], vec![0, 0, 1]]);
        assert_eq!(m.total(), 5);
        assert_eq!(m.row_normalized()[1][1], 2.0 / 3.0);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn macro_f1_hand_case() {
        let classes = set(&["a", "b"]);
        let truth = vec![set(&["a"]), set(&["a", "b"]), set(&[]), set(&["b"])];
        let pred = vec![set(&["a"]), set(&["b"]), set(&["a"]), set(&["b"])];
        let t = macro_f1(&pred, &truth, &classes).unwrap();
        // a: tp 1, fp 1, fn 1 -> P = R = F1 = 1/2; b: tp 2 -> 1
        assert_eq!(t.classes[0].f1, 0.5);
        assert_eq!(t.classes[1].f1, 1.0);
        assert_eq!(t.macro_f1, 0.75);
        let same = macro_f1(&truth, &truth, &classes).unwrap();
        assert_eq!(same.macro_f1, 1.0);
        let disjoint = macro_f1(&[set(&["b"])], &[set(&["a"])], &classes).unwrap();
        assert_eq!(disjoint.classes[0].f1, 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu2("a b c", "a b d").unwrap() - (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 1e-12);
        assert_eq!(bleu2("No edema.", "no edema").unwrap(), 1.0);
        assert_eq!(bleu2("x y", "a b").unwrap(), 0.0);
        assert_eq!(bleu2("edema", "edema").unwrap(), 1.0);
        assert_eq!(bleu2("...", "a"), Err(MetricError::EmptyCandidate));
        let short = bleu2("a b", "a b c d").unwrap();
        assert!((short - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn lexicon_examples() {
        let lex = LabelLexicon::for_classes(&set(&["edema", "effusion"])).unwrap();
        assert_eq!(lexicon_label("There is mild edema.", &lex), set(&["edema"]));
        assert!(lexicon_label("No edema.", &lex).is_empty());
        assert_eq!(lexicon_label("No edema. Small effusion.", &lex), set(&["effusion"]));
        assert_eq!(lexicon_label("No edema. Edema is seen.", &lex), set(&["edema"]));
        assert_eq!(lexicon_label("No sign of any new edema.", &lex), set(&["edema"]));
        assert!(lexicon_label("The chest is free of effusion.", &lex).is_empty());
        assert!(LabelLexicon::for_classes(&set(&["edema", "pulmonary edema"])).is_err());
    }

    #[test]
    fn hallucination_examples() {
        assert_eq!(hallucination_rate(&["stable compared to prior.", "clear lungs."]).unwrap(), 0.5);
        assert_eq!(hallucination_rate(&["clear lungs."]).unwrap(), 0.0);
        assert_eq!(hallucination_rate::<&str>(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn pearson_and_t_test() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 4.5 / (2.0f64 * (61.0 / 6.0)).sqrt()).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        let t = paired_t_test(&[0.8, 0.82, 0.79], &[0.7, 0.71, 0.72]).unwrap();
        assert!(t.t > 0.0 && t.p_value < 0.05);
        assert_eq!(t.df, 2.0);
    }
}
