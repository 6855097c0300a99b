//! End-to-end glue shared by the command line and the experiment harness:
//! split-tagged corpora, probing an encoder, generating reports for a split
//! and scoring them against ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{generate_report, select_prompts, CaptionError, GeneratedReport, ImageConditioned, ReportMode, SamplingPolicy};
use crate::data::{corpus_stats, load_examples, subsample_labels, CorpusStats, DataError, DatasetManifest, Image, PairedExample, Split};
use crate::evalmetrics::{bleu2, clinical_efficacy, hallucination_rate, EfficacyTable, LabelLexicon, MetricError};
use crate::model::ModelParams;
use crate::numerics::SeedTree;
use crate::textpipe::{TextError, Vocabulary};
use crate::training::{eval_input, evaluate_probe, feature_matrix, linear_probe_train, pooled_features, Normalization, ProbeConfig, ProbeHead, ProbeMetrics, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record {0} has no split tag")]
    Untagged(String),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("{0}")]
    Mismatch(String),
    #[error("reading {path}: {message}")]
    Stats { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// A split-tagged manifest with its examples loaded in manifest order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub manifest: DatasetManifest,
    pub examples: Vec<PairedExample>,
}

impl Corpus {
    pub fn new(classes: Vec<String>, manifest: DatasetManifest, images: Vec<Image>) -> Result<Self, PipelineError> {
        if images.len() != manifest.len() {
            return Err(PipelineError::Mismatch(format!("{} images for {} records", images.len(), manifest.len())));
        }
        let examples = manifest
            .records
            .iter()
            .zip(images)
            .map(|(r, image)| PairedExample {
                image,
                report: r.report(),
                labels: r.labels.clone(),
                severity: r.severity,
                patient_id: r.patient_id.clone(),
            })
            .collect();
        let corpus = Corpus { classes, manifest, examples };
        corpus.check_tags()?;
        Ok(corpus)
    }

    /// Reads `manifest.jsonl`, the images it lists and the class order from `stats.json`.
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        let manifest = DatasetManifest::read(&root.join("manifest.jsonl"))?;
        let stats = read_stats(&root.join("stats.json"))?;
        let examples = load_examples(root, &manifest)?;
        let corpus = Corpus {
            classes: stats.classes,
            manifest,
            examples,
        };
        corpus.check_tags()?;
        Ok(corpus)
    }

    fn check_tags(&self) -> Result<(), PipelineError> {
        match self.manifest.records.iter().find(|r| r.split.is_none()) {
            Some(r) => Err(PipelineError::Untagged(r.image.clone())),
            None => Ok(()),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.len()).filter(|&i| self.manifest.records[i].split == Some(split)).collect()
    }

    pub fn examples(&self, split: Split) -> Vec<PairedExample> {
        self.indices(split).into_iter().map(|i| self.examples[i].clone()).collect()
    }

    pub fn image_names(&self, split: Split) -> Vec<String> {
        self.indices(split).into_iter().map(|i| self.manifest.records[i].image.clone()).collect()
    }

    /// Pixel moments of the training images.
    pub fn train_normalization(&self) -> Result<Normalization, PipelineError> {
        let train = self.examples(Split::Train);
        if train.is_empty() {
            return Err(PipelineError::EmptySplit(Split::Train));
        }
        let images: Vec<Image> = train.into_iter().map(|e| e.image).collect();
        let stats = corpus_stats(&images, &self.manifest.split(Split::Train), &self.classes);
        Ok(Normalization {
            mean: stats.pixel_mean,
            std: stats.pixel_std,
        })
    }

    /// Fraction of training examples carrying each class.
    pub fn train_frequencies(&self) -> Vec<f64> {
        let train = self.manifest.split(Split::Train);
        let n = train.len().max(1) as f64;
        train.class_counts(&self.classes).into_iter().map(|c| c as f64 / n).collect()
    }
}

pub fn read_stats(path: &Path) -> Result<CorpusStats, PipelineError> {
    let err = |message: String| PipelineError::Stats {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub head: ProbeHead,
    /// Per-class Youden thresholds chosen on the validation split, or 0.5
    /// where validation has no positives or no negatives for the class.
    pub thresholds: Vec<f64>,
    pub labeled_examples: usize,
    pub validation: ProbeMetrics,
    pub test: ProbeMetrics,
}

/// Trains a linear head on frozen pooled features of a label-stratified
/// `fraction` of the training split, picks thresholds on validation and
/// scores the test split.
pub fn run_probe(params: &ModelParams<f32>, norm: Normalization, corpus: &Corpus, fraction: f64, cfg: &ProbeConfig) -> Result<ProbeReport, PipelineError> {
    let labeled = subsample_labels(&corpus.manifest, fraction, cfg.seed)?;
    let labeled_train = labeled.split(Split::Train);
    let keep: std::collections::HashSet<&str> = labeled_train.records.iter().map(|r| r.image.as_str()).collect();
    let train_idx: Vec<usize> = corpus
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| keep.contains(corpus.manifest.records[i].image.as_str()))
        .collect();
    let features = |idx: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<Vec<String>>), PipelineError> {
        let images: Vec<&Image> = idx.iter().map(|&i| &corpus.examples[i].image).collect();
        let labels = idx.iter().map(|&i| corpus.examples[i].labels.clone()).collect();
        Ok((feature_matrix(params, &images, norm)?, labels))
    };
    let (tx, ty) = features(&train_idx)?;
    let (vx, vy) = features(&corpus.indices(Split::Val))?;
    let (sx, sy) = features(&corpus.indices(Split::Test))?;
    for (split, x) in [(Split::Val, &vx), (Split::Test, &sx)] {
        if x.is_empty() {
            return Err(PipelineError::EmptySplit(split));
        }
    }
    let head = linear_probe_train(&tx, &ty, &vx, &vy, &corpus.classes, cfg)?;
    let validation = evaluate_probe(&head, &vx, &vy)?;
    let test = evaluate_probe(&head, &sx, &sy)?;
    Ok(ProbeReport {
        thresholds: validation.per_class.iter().map(|c| c.youden_threshold.unwrap_or(DEFAULT_THRESHOLD)).collect(),
        labeled_examples: train_idx.len(),
        head,
        validation,
        test,
    })
}

/// Where prompted modes get their prompts from.
#[derive(Clone, Debug)]
pub enum PromptSource {
    /// Classes whose probe probability reaches the class threshold.
    Classifier { head: ProbeHead, thresholds: Vec<f64>, negative: bool },
    Fixed(Vec<String>),
}

/// One report per example. Example `i` samples with seed
/// `SeedTree(policy.seed).child(i)`.
pub fn generate_reports(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    norm: Normalization,
    examples: &[PairedExample],
    names: &[String],
    mode: ReportMode,
    prompts: Option<&PromptSource>,
    policy: &SamplingPolicy,
) -> Result<Vec<GeneratedReport>, PipelineError> {
    if names.len() != examples.len() {
        return Err(PipelineError::Mismatch(format!("{} names for {} examples", names.len(), examples.len())));
    }
    let root = SeedTree::new(policy.seed);
    let side = params.config().image_side;
    let mut out = Vec::with_capacity(examples.len());
    for (i, (e, name)) in examples.iter().zip(names).enumerate() {
        let pixels = eval_input(&e.image, side, norm)?;
        let model = ImageConditioned::new(params, &pixels)?;
        let chosen = match (mode, prompts) {
            (ReportMode::Unprompted, _) | (_, None) => Vec::new(),
            (_, Some(PromptSource::Fixed(p))) => p.clone(),
            (_, Some(PromptSource::Classifier { head, thresholds, negative })) => {
                let pooled: Vec<f64> = pooled_features(params, &pixels)?.into_iter().map(f64::from).collect();
                select_prompts(&head.probabilities(&pooled), thresholds, &head.classes, *negative)?.prompts
            }
        };
        let item_policy = SamplingPolicy {
            seed: root.child(i as u64).key(),
            ..policy.clone()
        };
        let mut report = generate_report(&model, vocab, mode, &chosen, &item_policy)?;
        report.image = name.clone();
        out.push(report);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub reports: usize,
    /// Mean per-report BLEU-2; empty generations score zero.
    pub bleu2: f64,
    pub macro_f1: f64,
    pub per_class: EfficacyTable,
    pub hallucination_rate: f64,
    pub precision_frequency_r: Option<f64>,
}

pub fn score_reports(reports: &[GeneratedReport], references: &[PairedExample], classes: &[String], train_frequencies: &[f64]) -> Result<ReportMetrics, PipelineError> {
    if reports.len() != references.len() {
        return Err(PipelineError::Mismatch(format!("{} reports for {} references", reports.len(), references.len())));
    }
    let texts: Vec<&str> = reports.iter().map(|r| r.text.as_str()).collect();
    let mut bleu = 0.0;
    for (text, reference) in texts.iter().zip(references) {
        bleu += match bleu2(text, &reference.report.text()) {
            Ok(b) => b,
            Err(MetricError::EmptyCandidate) => 0.0,
            Err(e) => return Err(e.into()),
        };
    }
    let lexicon = LabelLexicon::for_classes(classes)?;
    let truth: Vec<Vec<String>> = references.iter().map(|r| r.labels.clone()).collect();
    let table = clinical_efficacy(&texts, &truth, &lexicon)?.with_frequencies(train_frequencies)?;
    Ok(ReportMetrics {
        reports: reports.len(),
        bleu2: bleu / reports.len().max(1) as f64,
        macro_f1: table.macro_f1,
        precision_frequency_r: table.precision_frequency_correlation(),
        per_class: table,
        hallucination_rate: hallucination_rate(&texts)?,
    })
}

/// Reports as JSON lines in input order.
pub fn reports_jsonl(reports: &[GeneratedReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}

/// Parses report lines, skipping blank lines and `{"metadata": ...}` header lines.
pub fn parse_reports_jsonl(text: &str) -> Result<Vec<GeneratedReport>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !is_metadata_line(l))
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Mismatch(format!("report line {}: {e}", i + 1))))
        .collect()
}

fn is_metadata_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(line).is_ok_and(|m| m.len() == 1 && m.contains_key("metadata"))
}
