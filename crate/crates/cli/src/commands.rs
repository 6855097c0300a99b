use std::path::{Path, PathBuf};

use anyhow::Context;
use bicap_core::caption::{GeneratedReport, ReportMode, SamplingPolicy};
use bicap_core::data::{read_pgm, split_dataset, synth_generate, PairedExample, Split, SynthConfig};
use bicap_core::model::ModelParams;
use bicap_core::pipeline::{generate_reports, parse_reports_jsonl, reports_jsonl, run_probe, score_reports, Corpus, ProbeReport, PromptSource, ReportMetrics};
use bicap_core::textpipe::{Report, Vocabulary};
use bicap_core::training::{
    history_csv, load_checkpoint, prepare_examples, pretrain as run_pretrain, save_checkpoint, Checkpoint, ProbeConfig, TrainConfig,
};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{config_error, load_json, set, ModelOverrides};

fn metadata(command: &str, config: &impl Serialize) -> Value {
    json!({
        "tool": "bicap",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// CSV with the metadata block as leading `#` comment lines.
fn with_csv_header(meta: &Value, csv: &str) -> String {
    format!("# {}\n{csv}", serde_json::to_string(meta).expect("metadata serializes"))
}

/// Prints a line, ignoring a closed pipe on the reading side.
fn print_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated fractions".to_string())
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for images, manifest, vocabulary and stats.
    #[arg(long, env = "BICAP_OUT")]
    out: PathBuf,
    /// JSON file with generator settings (`synth`, `split`, `split_seed`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    prior_fraction: Option<f64>,
    /// Train, validation and test fractions, e.g. "0.8,0.1,0.1".
    #[arg(long, value_parser = parse_fractions)]
    split: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenDataConfig {
    synth: SynthConfig,
    split: [f64; 3],
    split_seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            synth: SynthConfig::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }
}

pub fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg: GenDataConfig = load_json(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
        cfg.split_seed = seed;
    }
    set(&mut cfg.synth.n, args.n);
    set(&mut cfg.synth.side, args.side);
    set(&mut cfg.synth.prior_fraction, args.prior_fraction);
    set(&mut cfg.split, args.split);
    cfg.synth.validate().map_err(|e| config_error(e.to_string()))?;
    if cfg.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (cfg.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_error(format!("split fractions {:?} must be in [0, 1] and sum to 1", cfg.split)));
    }

    let mut corpus = synth_generate(&cfg.synth)?;
    corpus.manifest = split_dataset(&corpus.manifest, cfg.split, cfg.split_seed)?;
    create_dir(&args.out)?;
    corpus.write(&args.out)?;
    let stats_path = args.out.join("stats.json");
    let mut stats = serde_json::to_value(corpus.stats())?;
    stats["metadata"] = metadata("gen-data", &cfg);
    write_json(&stats_path, &stats)?;
    eprintln!("wrote {} examples to {}", corpus.manifest.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long, env = "BICAP_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "BICAP_OUT")]
    out: PathBuf,
    /// JSON file with `model` overrides and `train` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary file; defaults to the corpus vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    decoder_lr: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train only the forward decoder.
    #[arg(long)]
    forward_only: bool,
    /// Keep sentences that refer to prior studies.
    #[arg(long)]
    keep_priors: bool,
    /// Disable random rotations and crops.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainConfig {
    model: ModelOverrides,
    train: TrainConfig,
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::load(path).map_err(|e| config_error(format!("vocabulary {}: {e}", path.display())))
}

pub fn pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg: PretrainConfig = load_json(args.config.as_deref())?;
    let t = &mut cfg.train;
    set(&mut t.steps, args.steps);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.encoder_lr, args.encoder_lr);
    set(&mut t.decoder_lr, args.decoder_lr);
    set(&mut t.warmup_fraction, args.warmup_fraction);
    set(&mut t.eval_interval, args.eval_interval);
    set(&mut t.seed, args.seed);
    t.forward_only |= args.forward_only;
    t.remove_priors &= !args.keep_priors;
    t.augment &= !args.no_augment;
    let m = &mut cfg.model;
    set(&mut m.layers, args.layers.map(Some));
    set(&mut m.embed_dim, args.embed_dim.map(Some));
    set(&mut m.heads, args.heads.map(Some));
    set(&mut m.ff_dim, args.ff_dim.map(Some));
    set(&mut m.dropout, args.dropout.map(Some));
    cfg.train.validate().map_err(|e| config_error(e.to_string()))?;
    let vocab = load_vocab(&args.vocab.unwrap_or_else(|| args.corpus.join("vocab.txt")))?;
    let model = cfg.model.resolve(vocab.len());
    model.validate().map_err(|e| config_error(e.to_string()))?;

    let corpus = Corpus::load(&args.corpus)?;
    let norm = corpus.train_normalization()?;
    let train = prepare_examples(&corpus.examples(Split::Train), &vocab, model.context_len, cfg.train.remove_priors)?;
    let val = prepare_examples(&corpus.examples(Split::Val), &vocab, model.context_len, cfg.train.remove_priors)?;
    eprintln!("pretraining on {} examples ({} validation) for {} steps", train.len(), val.len(), cfg.train.steps);
    let outcome = run_pretrain(&train, &val, &vocab, &model, &cfg.train, norm)?;

    let resolved = json!({ "model": model, "train": cfg.train, "corpus": args.corpus, "normalization": norm });
    let meta = metadata("pretrain", &resolved);
    let mut best = outcome.best;
    best.metadata = meta.clone();
    create_dir(&args.out)?;
    save_checkpoint(&best, &args.out.join("checkpoint.bin"))?;
    write_file(&args.out.join("history.csv"), with_csv_header(&meta, &history_csv(&outcome.history)))?;
    let summary = json!({
        "metadata": meta,
        "initial_train_loss": outcome.initial_loss,
        "steps_run": outcome.history.len(),
        "best_step": best.step,
        "best_val_loss": best.val_loss,
        "prior_reports_in_training_text": train.iter().filter(|e| bicap_core::textpipe::detect_prior_reference(&bicap_core::textpipe::detokenize(e.tokens.valid(), &vocab).unwrap_or_default())).count(),
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    eprintln!("best validation loss {:.4} at step {}", best.val_loss, best.step);
    Ok(())
}

fn read_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "BICAP_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "BICAP_OUT")]
    out: PathBuf,
    /// JSON file with `probe`, `fraction`, `random_init` and `init_seed`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of the training split with labels.
    #[arg(long)]
    fraction: Option<f64>,
    /// Probe a freshly initialized encoder of the checkpoint's shape instead.
    #[arg(long)]
    random_init: bool,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ProbeRunConfig {
    probe: ProbeConfig,
    fraction: f64,
    random_init: bool,
    init_seed: u64,
}

impl Default for ProbeRunConfig {
    fn default() -> Self {
        ProbeRunConfig {
            probe: ProbeConfig::default(),
            fraction: 1.0,
            random_init: false,
            init_seed: 0,
        }
    }
}

pub fn probe(args: ProbeArgs) -> anyhow::Result<()> {
    let mut cfg: ProbeRunConfig = load_json(args.config.as_deref())?;
    set(&mut cfg.fraction, args.fraction);
    cfg.random_init |= args.random_init;
    set(&mut cfg.init_seed, args.init_seed);
    let p = &mut cfg.probe;
    set(&mut p.lr, args.lr);
    set(&mut p.epochs, args.epochs);
    set(&mut p.batch_size, args.batch_size);
    set(&mut p.patience, args.patience);
    set(&mut p.seed, args.seed);
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(config_error(format!("fraction {} outside (0, 1]", cfg.fraction)));
    }
    if !(p.lr > 0.0) || p.epochs == 0 || p.batch_size == 0 {
        return Err(config_error("probe lr, epochs and batch size must be positive"));
    }

    let ckpt = read_checkpoint(&args.checkpoint)?;
    let params = if cfg.random_init {
        ModelParams::init(&ckpt.model_config, cfg.init_seed)?
    } else {
        ckpt.params.clone()
    };
    let corpus = Corpus::load(&args.corpus)?;
    let fingerprint = params.fingerprint(None);
    let report = run_probe(&params, ckpt.normalization, &corpus, cfg.fraction, &cfg.probe)?;
    anyhow::ensure!(params.fingerprint(None) == fingerprint, "probe training modified the encoder");

    let resolved = json!({ "run": cfg, "checkpoint": args.checkpoint, "corpus": args.corpus, "encoder_fingerprint": fingerprint });
    create_dir(&args.out)?;
    write_json(&args.out.join("probe.json"), &json!({ "metadata": metadata("probe", &resolved), "result": report }))?;
    eprintln!("test macro AUC {:.4} ({} labeled examples)", report.test.macro_auc, report.labeled_examples);
    Ok(())
}

#[derive(Args)]
pub struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus whose split is captioned (ignored with --image).
    #[arg(long, env = "BICAP_CORPUS")]
    corpus: Option<PathBuf>,
    /// Caption a single PGM image instead of a corpus split.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, env = "BICAP_OUT")]
    out: PathBuf,
    /// JSON file with `sampling`, `mode`, `prompts`, `negative` and `split`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// unprompted, prompted or iterative.
    #[arg(long)]
    mode: Option<ReportMode>,
    /// Comma-separated prompts used for every image.
    #[arg(long)]
    prompts: Option<String>,
    /// probe.json whose classifier and thresholds choose prompts per image.
    #[arg(long)]
    auto_prompts: Option<PathBuf>,
    /// Prompt with the classes predicted absent, as "no <class>".
    #[arg(long)]
    negative: bool,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CaptionConfig {
    sampling: SamplingPolicy,
    mode: ReportMode,
    prompts: Vec<String>,
    negative: bool,
    split: Split,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig {
            sampling: SamplingPolicy::default(),
            mode: ReportMode::Unprompted,
            prompts: Vec::new(),
            negative: false,
            split: Split::Test,
        }
    }
}

fn read_probe(path: &Path) -> anyhow::Result<ProbeReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    serde_json::from_value(value.get("result").cloned().unwrap_or(Value::Null)).with_context(|| format!("{} has no probe result", path.display()))
}

fn efficacy_csv(meta: &Value, metrics: &ReportMetrics) -> String {
    with_csv_header(meta, &metrics.per_class.to_csv())
}

pub fn caption(args: CaptionArgs) -> anyhow::Result<()> {
    let mut cfg: CaptionConfig = load_json(args.config.as_deref())?;
    set(&mut cfg.mode, args.mode);
    set(&mut cfg.prompts, args.prompts.as_deref().map(parse_list));
    cfg.negative |= args.negative;
    set(&mut cfg.split, args.split);
    let s = &mut cfg.sampling;
    set(&mut s.p, args.p);
    set(&mut s.temperature, args.temperature);
    set(&mut s.max_len, args.max_len.map(Some));
    set(&mut s.seed, args.seed);
    if args.auto_prompts.is_some() && !cfg.prompts.is_empty() {
        return Err(config_error("--prompts and --auto-prompts are mutually exclusive"));
    }
    if cfg.mode != ReportMode::Unprompted && args.auto_prompts.is_none() && cfg.prompts.is_empty() {
        return Err(config_error("prompted modes need --prompts or --auto-prompts"));
    }
    if args.image.is_none() && args.corpus.is_none() {
        return Err(config_error("give --corpus or --image"));
    }

    let ckpt = read_checkpoint(&args.checkpoint)?;
    cfg.sampling.validate(ckpt.model_config.context_len).map_err(|e| config_error(e.to_string()))?;
    let source = match &args.auto_prompts {
        Some(path) => {
            let probe = read_probe(path)?;
            Some(PromptSource::Classifier {
                head: probe.head,
                thresholds: probe.thresholds,
                negative: cfg.negative,
            })
        }
        None if !cfg.prompts.is_empty() => Some(PromptSource::Fixed(cfg.prompts.clone())),
        None => None,
    };
    let vocab = ckpt.vocab()?;
    let (examples, names, corpus) = match &args.image {
        Some(path) => {
            let image = read_pgm(path)?;
            let example = PairedExample {
                image,
                report: Report::new("", ""),
                labels: Vec::new(),
                severity: None,
                patient_id: String::new(),
            };
            (vec![example], vec![path.display().to_string()], None)
        }
        None => {
            let corpus = Corpus::load(args.corpus.as_deref().expect("checked above"))?;
            (corpus.examples(cfg.split), corpus.image_names(cfg.split), Some(corpus))
        }
    };
    let reports = generate_reports(&ckpt.params, &vocab, ckpt.normalization, &examples, &names, cfg.mode, source.as_ref(), &cfg.sampling)?;

    let resolved = json!({ "caption": cfg, "checkpoint": args.checkpoint, "corpus": args.corpus, "image": args.image, "auto_prompts": args.auto_prompts });
    let meta = metadata("caption", &resolved);
    create_dir(&args.out)?;
    write_file(&args.out.join("reports.jsonl"), format!("{}\n{}", json!({ "metadata": meta }), reports_jsonl(&reports)))?;
    match corpus {
        Some(corpus) => {
            let metrics = score_reports(&reports, &examples, &corpus.classes, &corpus.train_frequencies())?;
            write_json(&args.out.join("metrics.json"), &json!({ "metadata": meta, "metrics": metrics }))?;
            write_file(&args.out.join("efficacy.csv"), efficacy_csv(&meta, &metrics))?;
            eprintln!(
                "{} reports: BLEU-2 {:.4}, macro F1 {:.4}, hallucination rate {:.4}",
                metrics.reports, metrics.bleu2, metrics.macro_f1, metrics.hallucination_rate
            );
        }
        None => print_stdout(&reports[0].text),
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Reports file written by `caption`.
    #[arg(long)]
    reports: PathBuf,
    #[arg(long, env = "BICAP_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "BICAP_OUT")]
    out: PathBuf,
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.reports).with_context(|| format!("reading {}", args.reports.display()))?;
    let reports: Vec<GeneratedReport> = parse_reports_jsonl(&text)?;
    let corpus = Corpus::load(&args.corpus)?;
    let index: std::collections::HashMap<&str, usize> = corpus.manifest.records.iter().enumerate().map(|(i, r)| (r.image.as_str(), i)).collect();
    let references = reports
        .iter()
        .map(|r| {
            index
                .get(r.image.as_str())
                .map(|&i| corpus.examples[i].clone())
                .ok_or_else(|| anyhow::anyhow!("report for {} has no corpus record", r.image))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let metrics = score_reports(&reports, &references, &corpus.classes, &corpus.train_frequencies())?;
    let meta = metadata("eval", &json!({ "reports": args.reports, "corpus": args.corpus }));
    create_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &json!({ "metadata": meta, "metrics": metrics }))?;
    write_file(&args.out.join("efficacy.csv"), efficacy_csv(&meta, &metrics))?;
    print_stdout(&serde_json::to_string_pretty(&metrics)?);
    Ok(())
}
