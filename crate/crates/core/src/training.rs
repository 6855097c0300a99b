//! Bidirectional-captioning pretraining, checkpoints and frozen-encoder linear probing.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment_image, AugmentPolicy, DataError, Image, PairedExample};
use crate::evalmetrics::{pr_auc, roc_auc, youden_threshold, BinaryScores, MetricError};
use crate::model::{Mode, ModelConfig, ModelError, ModelParams, ParamGroup};
use crate::numerics::{Graph, LookaheadConfig, LrSchedule, NumericsError, OptimizerState, SeedTree, Tensor};
use crate::textpipe::{prepare_training_sequence, remove_prior_references, TextError, TokenSequence, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BICAPCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOSS_NORMALIZATION: &str = "per-direction mean over valid tokens, summed over directions";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("class {0} has no positive training example")]
    AbsentClass(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub forward_only: bool,
    pub remove_priors: bool,
    pub eval_interval: usize,
    /// Random rotations and crops; normalization always applies.
    pub augment: bool,
    pub optimizer: LookaheadConfig,
    /// Ends training once a step's mean batch loss drops below this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            encoder_lr: 0.05,
            decoder_lr: 0.05,
            warmup_fraction: 0.05,
            seed: 0,
            forward_only: false,
            remove_priors: true,
            eval_interval: 200,
            augment: true,
            optimizer: LookaheadConfig::default(),
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps < 2 || self.batch_size == 0 || self.eval_interval == 0 {
            return bad("steps must be at least 2, batch size and eval interval at least 1".into());
        }
        for (name, lr) in [("encoder", self.encoder_lr), ("decoder", self.decoder_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} learning rate {lr} must be positive"));
            }
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

/// Pixel normalization constants of the training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// An image paired with its framed token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub image: Image,
    pub tokens: TokenSequence,
}

/// Frames each report for training, optionally dropping prior-study sentences first.
pub fn prepare_examples(examples: &[PairedExample], vocab: &Vocabulary, context: usize, remove_priors: bool) -> Result<Vec<TrainExample>, TrainError> {
    examples
        .iter()
        .map(|e| {
            let report = if remove_priors { remove_prior_references(&e.report) } else { e.report.clone() };
            Ok(TrainExample {
                image: e.image.clone(),
                tokens: prepare_training_sequence(&report, vocab, context)?,
            })
        })
        .collect()
}

/// Model input for an image: normalized, resized, clamped, no randomness.
pub fn eval_input(image: &Image, side: usize, norm: Normalization) -> Result<Vec<f32>, TrainError> {
    let policy = AugmentPolicy::evaluation(side, norm.mean, norm.std);
    let mut unused = SeedTree::new(0).rng();
    Ok(augment_image(image, &policy, &mut unused)?.into_pixels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,train_loss,val_loss,lr\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{val},{}\n", r.step, r.train_loss, r.lr));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub normalization: Normalization,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub step: usize,
    pub val_loss: f64,
    /// Free-form JSON describing how the checkpoint was produced.
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn vocab(&self) -> Result<Vocabulary, TrainError> {
        Ok(Vocabulary::from_tokens(self.vocabulary.iter().cloned())?)
    }
}

pub struct PretrainOutcome {
    pub best: Checkpoint,
    pub last: ModelParams<f32>,
    pub history: Vec<HistoryRow>,
    pub initial_loss: f64,
}

fn mean_loss(params: &ModelParams<f32>, examples: &[TrainExample], vocab: &Vocabulary, norm: Normalization, forward_only: bool) -> Result<f64, TrainError> {
    let side = params.config().image_side;
    let mut total = 0.0;
    for e in examples {
        let img = eval_input(&e.image, side, norm)?;
        total += params.bicaption_loss(&img, &e.tokens, vocab, forward_only)? as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Validation loss: dropout off, normalization only.
pub fn validation_loss(params: &ModelParams<f32>, examples: &[TrainExample], vocab: &Vocabulary, norm: Normalization, forward_only: bool) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    mean_loss(params, examples, vocab, norm, forward_only)
}

/// Runs `steps` of augment, encode, loss, backward and a Lookahead step with
/// scheduled per-group learning rates, keeping the checkpoint with the lowest
/// validation loss (evaluated every `eval_interval` steps and at the end).
pub fn pretrain(
    train: &[TrainExample],
    val: &[TrainExample],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    norm: Normalization,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("train and validation sets must be non-empty".into()));
    }
    if vocab.len() != model_config.vocab_size {
        return Err(TrainError::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model_config.vocab_size
        )));
    }
    let root = SeedTree::new(cfg.seed);
    let mut params = ModelParams::<f32>::init(model_config, root.named("init").key())?;
    let mut opt = OptimizerState::new(params.tensors(), cfg.optimizer)?;
    let schedule = LrSchedule::new(vec![cfg.encoder_lr, cfg.decoder_lr], cfg.steps, cfg.warmup_fraction)?;
    let groups: Vec<usize> = (0..params.tensors().len())
        .map(|i| match params.group(i) {
            ParamGroup::Encoder => 0,
            ParamGroup::Decoder => 1,
        })
        .collect();
    let policy = if cfg.augment {
        AugmentPolicy::training(model_config.image_side, norm.mean, norm.std)
    } else {
        AugmentPolicy::evaluation(model_config.image_side, norm.mean, norm.std)
    };

    let initial_loss = mean_loss(&params, train, vocab, norm, cfg.forward_only)?;
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut grads: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();

    for step in 1..=cfg.steps {
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        let mut batch_loss = 0.0f64;
        let step_seeds = root.named("step").child(step as u64);
        for slot in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut root.named("epoch").child(epoch).rng());
                epoch += 1;
                cursor = 0;
            }
            let ex = &train[order[cursor]];
            cursor += 1;
            let seeds = step_seeds.child(slot as u64);
            let img = augment_image(&ex.image, &policy, &mut seeds.named("augment").rng())?.into_pixels();
            let mut dropout_rng = seeds.named("dropout").rng();
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let vis = params.encode_graph(&mut g, &b, &img)?;
            let loss = params.bicaption_loss_graph(&mut g, &b, vis, &ex.tokens, vocab, cfg.forward_only, &mut Mode::Train(&mut dropout_rng))?;
            let value = g.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { step, loss: value });
            }
            g.backward(loss).map_err(|_| TrainError::Diverged { step, loss: value })?;
            for (acc, node) in grads.iter_mut().zip(b.nodes()) {
                if let Some(gr) = g.grad(*node) {
                    acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
            }
            batch_loss += value;
        }
        let inv = 1.0 / cfg.batch_size as f32;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        let rates = [schedule.lr_at_step(0, step)?, schedule.lr_at_step(1, step)?];
        let lrs: Vec<f64> = groups.iter().map(|&g| rates[g]).collect();
        opt.step(params.tensors_mut(), &grads, &lrs)?;
        let train_loss = batch_loss / cfg.batch_size as f64;
        let stop = cfg.stop_below.is_some_and(|t| train_loss < t);
        let val_loss = if step % cfg.eval_interval == 0 || step == cfg.steps || stop {
            let v = validation_loss(&params, val, vocab, norm, cfg.forward_only)?;
            if !v.is_finite() {
                return Err(TrainError::Diverged { step, loss: v });
            }
            if best.as_ref().is_none_or(|b| v < b.val_loss) {
                best = Some(Checkpoint {
                    model_config: model_config.clone(),
                    vocabulary: vocab.tokens().to_vec(),
                    normalization: norm,
                    params: params.clone(),
                    optimizer: opt.clone(),
                    step,
                    val_loss: v,
                    metadata: serde_json::json!({
                        "train_config": cfg,
                        "loss_normalization": LOSS_NORMALIZATION,
                    }),
                });
            }
            Some(v)
        } else {
            None
        };
        history.push(HistoryRow {
            step,
            train_loss,
            val_loss,
            lr: rates[1],
        });
        if stop {
            break;
        }
    }
    Ok(PretrainOutcome {
        best: best.expect("the final step always evaluates"),
        last: params,
        history,
        initial_loss,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    vocabulary: Vec<String>,
    normalization: Normalization,
    step: usize,
    val_loss: f64,
    loss_normalization: String,
    optimizer: LookaheadConfig,
    optimizer_counter: usize,
    metadata: serde_json::Value,
}

fn put_array(out: &mut Vec<u8>, data: &[f32]) {
    out.extend((data.len() as u64).to_le_bytes());
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::Checkpoint("file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, TrainError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| TrainError::Checkpoint(format!("implausible length {n}")))
    }

    fn array(&mut self) -> Result<Vec<f32>, TrainError> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| TrainError::Checkpoint("overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Magic, version, length-prefixed JSON header, then for every parameter its
/// name, shape and little-endian `f32` values, then the optimizer's slow and
/// momentum buffers.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        model_config: ckpt.model_config.clone(),
        vocabulary: ckpt.vocabulary.clone(),
        normalization: ckpt.normalization,
        step: ckpt.step,
        val_loss: ckpt.val_loss,
        loss_normalization: LOSS_NORMALIZATION.into(),
        optimizer: ckpt.optimizer.config,
        optimizer_counter: ckpt.optimizer.counter(),
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    let params = &ckpt.params;
    out.extend((params.tensors().len() as u64).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            out.extend((*d as u64).to_le_bytes());
        }
        put_array(&mut out, t.data());
    }
    for buf in ckpt.optimizer.slow().iter().chain(ckpt.optimizer.velocity()) {
        put_array(&mut out, buf);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.len()?;
    let header: Header = serde_json::from_slice(r.take(n)?).map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
    let count = r.len()?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("non-utf8 name".into()))?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let data = r.array()?;
        named.push((name, Tensor::new(shape, data)?));
    }
    let params = ModelParams::from_named(&header.model_config, named)?;
    let mut buffers = (0..2 * count).map(|_| r.array()).collect::<Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    let velocity = buffers.split_off(count);
    let optimizer = OptimizerState::from_parts(header.optimizer, buffers, velocity, header.optimizer_counter)?;
    Ok(Checkpoint {
        model_config: header.model_config,
        vocabulary: header.vocabulary,
        normalization: header.normalization,
        params,
        optimizer,
        step: header.step,
        val_loss: header.val_loss,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Mean of the encoder's visual feature rows.
pub fn pooled_features(params: &ModelParams<f32>, image: &[f32]) -> Result<Vec<f32>, TrainError> {
    let f = params.encode_image(image)?;
    let mut pooled = vec![0.0f64; f.dim];
    for r in 0..f.rows {
        for (p, v) in pooled.iter_mut().zip(f.row(r)) {
            *p += *v as f64;
        }
    }
    Ok(pooled.into_iter().map(|v| (v / f.rows as f64) as f32).collect())
}

/// Pooled features for a set of raw images (normalization only).
pub fn feature_matrix(params: &ModelParams<f32>, images: &[&Image], norm: Normalization) -> Result<Vec<Vec<f64>>, TrainError> {
    let side = params.config().image_side;
    images
        .iter()
        .map(|img| Ok(pooled_features(params, &eval_input(img, side, norm)?)?.into_iter().map(f64::from).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before the rate is halved.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.02,
            batch_size: 16,
            epochs: 60,
            patience: 5,
            seed: 0,
        }
    }
}

/// Linear multilabel head over pooled features: `sigmoid(x·W + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub classes: Vec<String>,
    pub input_dim: usize,
    /// Row-major `[input_dim, classes]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.classes.len();
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weights[i * k..(i + 1) * k]) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy from a logit.
fn bce(z: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn targets(labels: &[Vec<String>], classes: &[String]) -> Vec<Vec<bool>> {
    labels.iter().map(|l| classes.iter().map(|c| l.contains(c)).collect()).collect()
}

/// Trains only a linear head with per-class logistic loss and minibatch SGD;
/// the rate halves when validation loss has not improved for `patience` epochs.
/// Features are standardized during optimization and the scaling is folded
/// into the returned weights, so the head applies to raw pooled features.
pub fn linear_probe_train(
    train_x: &[Vec<f64>],
    train_labels: &[Vec<String>],
    val_x: &[Vec<f64>],
    val_labels: &[Vec<String>],
    classes: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeHead, TrainError> {
    if train_x.is_empty() || train_x.len() != train_labels.len() || val_x.len() != val_labels.len() {
        return Err(TrainError::Config("probe inputs must be non-empty and aligned".into()));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config("probe lr, batch size and epochs must be positive".into()));
    }
    let ty = targets(train_labels, classes);
    for (k, c) in classes.iter().enumerate() {
        if !ty.iter().any(|t| t[k]) {
            return Err(TrainError::AbsentClass(c.clone()));
        }
    }
    let d = train_x[0].len();
    let k = classes.len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = train_x.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let standardize = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let sx: Vec<Vec<f64>> = train_x.iter().map(|x| standardize(x)).collect();
    let svx: Vec<Vec<f64>> = val_x.iter().map(|x| standardize(x)).collect();
    let vy = targets(val_labels, classes);

    let mut head = ProbeHead {
        classes: classes.to_vec(),
        input_dim: d,
        weights: vec![0.0; d * k],
        bias: vec![0.0; k],
    };
    let loss_on = |head: &ProbeHead, xs: &[Vec<f64>], ys: &[Vec<bool>]| -> f64 {
        let total: f64 = xs.iter().zip(ys).map(|(x, y)| head.logits(x).iter().zip(y).map(|(z, t)| bce(*z, *t)).sum::<f64>()).sum();
        total / xs.len().max(1) as f64
    };
    let (eval_x, eval_y) = if val_x.is_empty() { (&sx, &ty) } else { (&svx, &vy) };
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let root = SeedTree::new(cfg.seed).named("probe");
    let mut order: Vec<usize> = (0..sx.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut root.child(epoch as u64).rng());
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d * k];
            let mut gb = vec![0.0; k];
            for &i in batch {
                let z = head.logits(&sx[i]);
                for c in 0..k {
                    let err = sigmoid(z[c]) - if ty[i][c] { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for j in 0..d {
                        gw[j * k + c] += err * sx[i][j];
                    }
                }
            }
            let step = lr / batch.len() as f64;
            head.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
            head.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
        }
        let val = loss_on(&head, eval_x, eval_y);
        if val < best - 1e-9 {
            best = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr *= 0.5;
                stale = 0;
            }
        }
    }
    // fold standardization: w' = w * s, b' = b - Σ m * s * w
    for j in 0..d {
        for c in 0..k {
            let w = head.weights[j * k + c] * scale[j];
            head.bias[c] -= mean[j] * w;
            head.weights[j * k + c] = w;
        }
    }
    Ok(head)
}

/// Per-class probe scores; `None` when the evaluated split lacks positives
/// or negatives for the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbeMetrics {
    pub class: String,
    pub auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub youden_threshold: Option<f64>,
    pub youden_j: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub per_class: Vec<ClassProbeMetrics>,
    /// Means over the classes with defined scores.
    pub macro_auc: f64,
    pub macro_pr_auc: f64,
}

fn defined_mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-class AUC, PR-AUC and Youden threshold of a head's probabilities.
pub fn evaluate_probe(head: &ProbeHead, xs: &[Vec<f64>], labels: &[Vec<String>]) -> Result<ProbeMetrics, TrainError> {
    let probs: Vec<Vec<f64>> = xs.iter().map(|x| head.probabilities(x)).collect();
    let ys = targets(labels, &head.classes);
    let mut per_class = Vec::new();
    for (c, name) in head.classes.iter().enumerate() {
        let s = BinaryScores::new(probs.iter().map(|p| p[c]).collect(), ys.iter().map(|y| y[c]).collect())?;
        let defined = s.positives() > 0 && s.negatives() > 0;
        let youden = if defined { Some(youden_threshold(&s)?) } else { None };
        per_class.push(ClassProbeMetrics {
            class: name.clone(),
            auc: if defined { Some(roc_auc(&s)?) } else { None },
            pr_auc: if defined { Some(pr_auc(&s)?) } else { None },
            youden_threshold: youden.map(|y| y.0),
            youden_j: youden.map(|y| y.1),
        });
    }
    Ok(ProbeMetrics {
        macro_auc: defined_mean(per_class.iter().map(|m| m.auc)),
        macro_pr_auc: defined_mean(per_class.iter().map(|m| m.pr_auc)),
        per_class,
    })
}
