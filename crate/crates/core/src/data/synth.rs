use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{quantize, write_pgm, Image};
use super::{corpus_stats, corpus_vocabulary, CorpusStats, DataError, DatasetManifest, ManifestRecord};
use crate::numerics::SeedTree;

/// Distinct visual motifs available to pathologies, in assignment order:
/// bright disc, bright wedge, checker patch, bright line, dark zigzag, dark crescent.
pub const MOTIF_COUNT: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathologySpec {
    pub name: String,
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub side: usize,
    /// The i-th pathology is drawn with the i-th motif.
    pub pathologies: Vec<PathologySpec>,
    /// Index of the pathology that carries a 1..=3 severity grade.
    pub severity_class: Option<usize>,
    /// Probability that an absent pathology is explicitly negated in the report.
    pub negation_rate: f64,
    /// Fraction of reports whose findings open with a sentence referring to a prior study.
    pub prior_fraction: f64,
    pub max_images_per_patient: usize,
    /// Scales every motif's amplitude.
    pub contrast: f64,
    /// Standard deviation of per-pixel background noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let names = ["edema", "effusion", "opacity", "device", "fracture", "pneumothorax"];
        let prevalence = [0.30, 0.25, 0.25, 0.20, 0.15, 0.15];
        SynthConfig {
            seed: 0,
            n: 2000,
            side: 64,
            pathologies: names
                .iter()
                .zip(prevalence)
                .map(|(n, p)| PathologySpec {
                    name: n.to_string(),
                    prevalence: p,
                })
                .collect(),
            severity_class: Some(0),
            negation_rate: 0.5,
            prior_fraction: 0.4,
            max_images_per_patient: 3,
            contrast: 1.0,
            noise: 0.06,
        }
    }
}

impl SynthConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.pathologies.iter().map(|p| p.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.pathologies.len() > MOTIF_COUNT {
            return Err(DataError::TooManyPathologies {
                requested: self.pathologies.len(),
                available: MOTIF_COUNT,
            });
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.side < 16 {
            return bad(format!("image side {} is below 16", self.side));
        }
        if self.max_images_per_patient == 0 {
            return bad("patients need at least one image".into());
        }
        for p in &self.pathologies {
            if !(0.0..=1.0).contains(&p.prevalence) {
                return bad(format!("prevalence {} of {} outside [0, 1]", p.prevalence, p.name));
            }
            if p.name.is_empty() || p.name.chars().any(|c| !c.is_ascii_lowercase()) {
                return bad(format!("pathology name {:?} must be a lowercase word", p.name));
            }
        }
        let mut names = self.class_names();
        names.sort();
        names.dedup();
        if names.len() != self.pathologies.len() {
            return bad("pathology names must be distinct".into());
        }
        if self.severity_class.is_some_and(|s| s >= self.pathologies.len()) {
            return bad("severity class index out of range".into());
        }
        for (name, v) in [("negation rate", self.negation_rate), ("prior fraction", self.prior_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.contrast >= 0.0) || !(self.noise >= 0.0) {
            return bad("contrast and noise must be non-negative".into());
        }
        Ok(())
    }
}

/// Generated images with their manifest (no split tags yet).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub classes: Vec<String>,
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl SynthCorpus {
    pub fn stats(&self) -> CorpusStats {
        corpus_stats(&self.images, &self.manifest, &self.classes)
    }

    /// Writes `images/*.pgm`, `manifest.jsonl`, `vocab.txt` and `stats.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<(), DataError> {
        let images = root.join("images");
        std::fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
        for (rec, img) in self.manifest.records.iter().zip(&self.images) {
            write_pgm(&root.join(&rec.image), img)?;
        }
        self.manifest.write(&root.join("manifest.jsonl"))?;
        let vocab_path = root.join("vocab.txt");
        corpus_vocabulary(&self.manifest)?
            .save(&vocab_path)
            .map_err(|e| DataError::io(&vocab_path, e))?;
        let stats_path = root.join("stats.json");
        let json = serde_json::to_string_pretty(&self.stats()).expect("stats serialize");
        std::fs::write(&stats_path, json + "\n").map_err(|e| DataError::io(&stats_path, e))
    }
}

#[derive(Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    left: bool,
    upper: bool,
    /// 0..=2 severity tier or 0..=1 size tier.
    tier: usize,
}

const SEVERITY_WORDS: [&str; 3] = ["mild", "moderate", "severe"];
const SIZE_WORDS: [&str; 2] = ["small", "large"];
const NEGATIONS: [&str; 5] = ["No {}.", "There is no {}.", "No evidence of {}.", "Without evidence of {}.", "The chest is free of {}."];
const POSITIVES: [&str; 3] = ["There is {m} {} in the {s} {z} zone.", "{M} {} is seen in the {s} {z} zone.", "{M} {s} {z} {}."];
const FILLERS: [&str; 4] = [
    "Heart size is normal.",
    "The mediastinum is unremarkable.",
    "Osseous structures are intact.",
    "Lung volumes are normal.",
];
const PRIORS: [&str; 3] = [
    "Compared to the prior radiograph there is little change.",
    "Findings are stable since the prior study.",
    "In comparison with the previous exam the appearance is similar.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn modifier(cfg: &SynthConfig, class: usize, p: &Placement) -> &'static str {
    if cfg.severity_class == Some(class) {
        SEVERITY_WORDS[p.tier]
    } else {
        SIZE_WORDS[p.tier]
    }
}

fn positive_sentence(template: &str, name: &str, m: &str, p: &Placement) -> String {
    template
        .replace("{M}", &capitalize(m))
        .replace("{m}", m)
        .replace("{s}", if p.left { "left" } else { "right" })
        .replace("{z}", if p.upper { "upper" } else { "lower" })
        .replace("{}", name)
}

fn smooth_step(d: f64, edge: f64) -> f64 {
    (1.0 - d / edge).clamp(0.0, 1.0)
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy).max(1e-12)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Adds motif `kind` to the float canvas.
fn draw_motif(canvas: &mut [f64], side: usize, kind: usize, p: &Placement, amplitude: f64, rng: &mut ChaCha8Rng) {
    let s = side as f64;
    let radius = s * if kind == 0 { 0.10 } else { [0.07, 0.11][p.tier.min(1)] };
    let angle = rng.random_range(0.0..PI);
    let zig: Vec<(f64, f64)> = {
        let mut pts = vec![(p.cx - 1.5 * radius, p.cy)];
        for i in 1..=4 {
            let y = p.cy + if i % 2 == 1 { -0.4 } else { 0.4 } * radius;
            pts.push((p.cx - 1.5 * radius + 0.75 * radius * i as f64, y));
        }
        pts
    };
    let line = (
        (p.cx - 2.0 * radius * angle.cos(), p.cy - 2.0 * radius * angle.sin()),
        (p.cx + 2.0 * radius * angle.cos(), p.cy + 2.0 * radius * angle.sin()),
    );
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64, y as f64);
            let (dx, dy) = (px - p.cx, py - p.cy);
            let d = (dx * dx + dy * dy).sqrt();
            let v = match kind {
                0 => (-(d * d) / (2.0 * radius * radius)).exp(),
                1 => {
                    // downward-opening wedge with its apex above the centre
                    let ay = dy + radius;
                    if ay > 0.0 && ay < 2.2 * radius && dx.abs() < 0.7 * ay {
                        smooth_step(dx.abs() - 0.7 * ay + 1.5, 1.5).max(0.0)
                    } else {
                        0.0
                    }
                }
                2 => {
                    if dx.abs() < radius && dy.abs() < radius && ((x / 2) + (y / 2)) % 2 == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                3 => 1.2 * smooth_step(segment_distance(px, py, line.0, line.1), 1.2),
                4 => {
                    let d = zig.windows(2).map(|w| segment_distance(px, py, w[0], w[1])).fold(f64::MAX, f64::min);
                    -1.2 * smooth_step(d, 1.2)
                }
                _ => {
                    if dy < 0.0 && d > radius && d < 1.5 * radius {
                        -1.0
                    } else {
                        0.0
                    }
                }
            };
            canvas[y * side + x] += amplitude * v;
        }
    }
}

fn background(side: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) * 2.0 * PI / s,
                rng.random_range(0.5..2.5) * 2.0 * PI / s,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.04),
            )
        })
        .collect();
    let gauss = Normal::new(0.0, noise.max(1e-12)).expect("finite std");
    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = 0.42 + 0.12 * fy / s;
            for (cx, sign) in [(0.3, 1.0), (0.7, 1.0)] {
                let ex = (fx - cx * s) / (0.17 * s);
                let ey = (fy - 0.5 * s) / (0.32 * s);
                if ex * ex + ey * ey < 1.0 {
                    v -= sign * 0.12;
                }
            }
            for (kx, ky, ph, a) in &waves {
                v += a * (kx * fx + ky * fy + ph).sin();
            }
            if noise > 0.0 {
                v += gauss.sample(rng);
            }
            px.push(v);
        }
    }
    px
}

struct Drawn {
    image: Image,
    record: ManifestRecord,
}

fn generate_one(cfg: &SynthConfig, index: usize, patient: &str, rng: &mut ChaCha8Rng) -> Drawn {
    let side = cfg.side;
    let s = side as f64;
    let mut canvas = background(side, cfg.noise, rng);
    let mut present = Vec::new();
    for (k, spec) in cfg.pathologies.iter().enumerate() {
        if rng.random::<f64>() < spec.prevalence {
            let left = rng.random::<bool>();
            let upper = rng.random::<bool>();
            let span = |lo: bool, r: &mut ChaCha8Rng| if lo { r.random_range(0.22..0.42) } else { r.random_range(0.58..0.78) } * s;
            let p = Placement {
                cx: span(left, rng),
                cy: span(upper, rng),
                left,
                upper,
                tier: if cfg.severity_class == Some(k) {
                    rng.random_range(0..3)
                } else {
                    rng.random_range(0..2)
                },
            };
            present.push((k, p));
        }
    }
    let base = 0.22 * cfg.contrast;
    for (k, p) in &present {
        let amp = if cfg.severity_class == Some(*k) {
            base * [0.6, 1.0, 1.4][p.tier]
        } else {
            base * rng.random_range(0.8..1.2)
        };
        draw_motif(&mut canvas, side, *k, p, amp, rng);
    }
    let pixels: Vec<f32> = canvas.iter().map(|&v| quantize(v as f32) as f32 / 255.0).collect();

    let mut sentences: Vec<String> = present
        .iter()
        .map(|(k, p)| {
            let t = POSITIVES.choose(rng).expect("templates");
            positive_sentence(t, &cfg.pathologies[*k].name, modifier(cfg, *k, p), p)
        })
        .collect();
    for (k, spec) in cfg.pathologies.iter().enumerate() {
        if !present.iter().any(|(j, _)| *j == k) && rng.random::<f64>() < cfg.negation_rate {
            sentences.push(NEGATIONS.choose(rng).expect("templates").replace("{}", &spec.name));
        }
    }
    let fillers = rng.random_range(1..=2);
    sentences.extend(FILLERS.choose_multiple(rng, fillers).map(|s| s.to_string()));
    sentences.shuffle(rng);
    if rng.random::<f64>() < cfg.prior_fraction {
        sentences.insert(0, PRIORS.choose(rng).expect("templates").to_string());
    }
    let impression = if present.is_empty() {
        "No acute cardiopulmonary abnormality.".to_string()
    } else {
        let parts: Vec<String> = present
            .iter()
            .map(|(k, p)| format!("{} {}", modifier(cfg, *k, p), cfg.pathologies[*k].name))
            .collect();
        let joined = match parts.split_last() {
            Some((last, [])) => last.clone(),
            Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
            None => unreachable!(),
        };
        format!("{}.", capitalize(&joined))
    };
    Drawn {
        image: Image::new(side, side, pixels).expect("square canvas"),
        record: ManifestRecord {
            image: format!("images/{index:06}.pgm"),
            findings: sentences.join(" "),
            impression,
            labels: present.iter().map(|(k, _)| cfg.pathologies[*k].name.clone()).collect(),
            severity: present
                .iter()
                .find(|(k, _)| cfg.severity_class == Some(*k))
                .map(|(_, p)| p.tier as u8 + 1),
            patient_id: patient.to_string(),
            split: None,
        },
    }
}

/// Seeded synthetic corpus: each image renders exactly its labels' motifs over
/// textured noise, and each report states those labels (plus negations of some
/// absent ones) through fixed sentence templates.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus, DataError> {
    cfg.validate()?;
    let root = SeedTree::new(cfg.seed);
    let mut patient_rng = root.named("patients").rng();
    let examples = root.named("examples");
    let mut records = Vec::with_capacity(cfg.n);
    let mut images = Vec::with_capacity(cfg.n);
    let (mut patient, mut remaining) = (0usize, 0usize);
    for i in 0..cfg.n {
        if remaining == 0 {
            patient += 1;
            remaining = patient_rng.random_range(1..=cfg.max_images_per_patient);
        }
        remaining -= 1;
        let drawn = generate_one(cfg, i, &format!("p{patient:05}"), &mut examples.child(i as u64).rng());
        records.push(drawn.record);
        images.push(drawn.image);
    }
    Ok(SynthCorpus {
        classes: cfg.class_names(),
        manifest: DatasetManifest::new(records),
        images,
    })
}
