//! Images, dataset manifests, patient-level splits and the synthetic paired corpus.

mod image;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::SeedTree;
use crate::textpipe::{words, Report, TextError, Vocabulary, PAD, SEP, SOS, STOP, UNK};

pub use image::{augment_image, encode_pgm, normalize_image, parse_pgm, read_pgm, write_pgm, AugmentPolicy, Image, CLAMP};
pub use synth::{synth_generate, PathologySpec, SynthConfig, SynthCorpus, MOTIF_COUNT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid PGM: {0}")]
    Pgm(String),
    #[error("invalid image: {0}")]
    ImageShape(String),
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
    #[error("image {width}x{height} is smaller than the {side}px target")]
    ImageTooSmall { width: usize, height: usize, side: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{requested} pathologies requested but only {available} motifs exist")]
    TooManyPathologies { requested: usize, available: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("subsampling leaves no positive example of {0}")]
    EmptyClass(String),
    #[error(transparent)]
    Text(#[from] TextError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line. `image` is relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub findings: String,
    pub impression: String,
    pub labels: Vec<String>,
    pub severity: Option<u8>,
    pub patient_id: String,
    pub split: Option<Split>,
}

impl ManifestRecord {
    pub fn report(&self) -> Report {
        Report::new(self.findings.clone(), self.impression.clone())
    }

    pub fn has_label(&self, class: &str) -> bool {
        self.labels.iter().any(|l| l == class)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        DatasetManifest { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| DataError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(DatasetManifest { records })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| DataError::io(path, e))
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| r.split == Some(split)).cloned().collect(),
        }
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    /// Positive count per class, in `classes` order.
    pub fn class_counts(&self, classes: &[String]) -> Vec<usize> {
        classes
            .iter()
            .map(|c| self.records.iter().filter(|r| r.has_label(c)).count())
            .collect()
    }
}

/// An image with its report, labels and patient, loaded into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub image: Image,
    pub report: Report,
    pub labels: Vec<String>,
    pub severity: Option<u8>,
    pub patient_id: String,
}

pub fn load_examples(root: &Path, manifest: &DatasetManifest) -> Result<Vec<PairedExample>, DataError> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(PairedExample {
                image: read_pgm(&root.join(&r.image))?,
                report: r.report(),
                labels: r.labels.clone(),
                severity: r.severity,
                patient_id: r.patient_id.clone(),
            })
        })
        .collect()
}

/// Assigns whole patients to train/val/test so that example counts approach
/// `fractions`; each patient goes to the split currently furthest below target.
pub fn split_dataset(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest, DataError> {
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(DataError::Fractions(format!("{fractions:?} contains a negative or non-finite value")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(format!("{fractions:?} sums to {total}")));
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_patient.entry(&r.patient_id).or_default().push(i);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut SeedTree::new(seed).named("split").rng());
    let n = manifest.len() as f64;
    let mut counts = [0usize; 3];
    let mut out = manifest.clone();
    for p in patients {
        let members = &by_patient[p];
        let pick = (0..3)
            .filter(|&s| fractions[s] > 0.0)
            .max_by(|&a, &b| {
                let da = fractions[a] * n - counts[a] as f64;
                let db = fractions[b] * n - counts[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("at least one positive fraction");
        counts[pick] += members.len();
        for &i in members {
            out.records[i].split = Some(Split::ALL[pick]);
        }
    }
    Ok(out)
}

/// Stratified (by exact label set) subset of the training records; records in
/// other splits are kept. The number kept per stratum uses largest-remainder
/// rounding so the total is `round(fraction × train size)`.
pub fn subsample_labels(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Fractions(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let is_train = |r: &ManifestRecord| r.split.is_none_or(|s| s == Split::Train);
    if fraction == 1.0 {
        return Ok(manifest.clone());
    }
    let mut strata: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate().filter(|(_, r)| is_train(r)) {
        let mut key = r.labels.clone();
        key.sort();
        strata.entry(key).or_default().push(i);
    }
    let train_total: usize = strata.values().map(Vec::len).sum();
    let target = (fraction * train_total as f64).round() as usize;
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|m| {
            let exact = fraction * m.len() as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &s in order.iter().take(target.saturating_sub(assigned)) {
        quotas[s].0 += 1;
    }
    let root = SeedTree::new(seed).named("subsample");
    let mut keep = vec![false; manifest.len()];
    for (s, members) in strata.values().enumerate() {
        let mut members = members.clone();
        members.shuffle(&mut root.child(s as u64).rng());
        for &i in members.iter().take(quotas[s].0) {
            keep[i] = true;
        }
    }
    let before: BTreeSet<&String> = manifest.records.iter().filter(|r| is_train(r)).flat_map(|r| &r.labels).collect();
    let records: Vec<ManifestRecord> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| keep[*i] || !is_train(r))
        .map(|(_, r)| r.clone())
        .collect();
    let after: BTreeSet<&String> = records.iter().filter(|r| is_train(r)).flat_map(|r| &r.labels).collect();
    if let Some(lost) = before.difference(&after).next() {
        return Err(DataError::EmptyClass((*lost).clone()));
    }
    Ok(DatasetManifest { records })
}

/// Special tokens followed by every distinct word of the corpus reports, sorted.
pub fn corpus_vocabulary(manifest: &DatasetManifest) -> Result<Vocabulary, DataError> {
    let mut seen = BTreeSet::new();
    for r in &manifest.records {
        for w in words(&r.findings).into_iter().chain(words(&r.impression)) {
            seen.insert(w);
        }
    }
    let specials = [PAD, SOS, SEP, UNK, STOP];
    let tokens = specials
        .iter()
        .map(|s| s.to_string())
        .chain(seen.into_iter().filter(|w| !specials.contains(&w.as_str())));
    Ok(Vocabulary::from_tokens(tokens)?)
}

/// Pixel moments and label frequencies of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    /// Class names in label order.
    pub classes: Vec<String>,
    pub class_counts: BTreeMap<String, usize>,
    pub prior_reference_reports: usize,
}

pub fn corpus_stats(images: &[Image], manifest: &DatasetManifest, classes: &[String]) -> CorpusStats {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for img in images {
        sum += img.pixels().iter().map(|&v| v as f64).sum::<f64>();
        count += img.pixels().len();
    }
    let mean = sum / count.max(1) as f64;
    let var = images
        .iter()
        .flat_map(|i| i.pixels())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / count.max(1) as f64;
    CorpusStats {
        examples: manifest.len(),
        pixel_mean: mean,
        pixel_std: var.sqrt(),
        classes: classes.to_vec(),
        class_counts: classes.iter().cloned().zip(manifest.class_counts(classes)).collect(),
        prior_reference_reports: manifest
            .records
            .iter()
            .filter(|r| crate::textpipe::detect_prior_reference(&r.report().text()))
            .count(),
    }
}
