//! Report generation: nucleus sampling, prompted autoregressive captioning in
//! either direction, and the unprompted, prompted and iterative report modes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Direction, ModelError, ModelParams, VisualFeatures};
use crate::numerics::SeedTree;
use crate::textpipe::{detokenize, split_sentences, tokenize, TextError, TokenSequence, Vocabulary};

/// Below this temperature sampling is replaced by argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid sampling policy: {0}")]
    Policy(String),
    #[error("prompt of {len} tokens leaves no room in a context of {context}")]
    PromptTooLong { len: usize, context: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPolicy {
    /// Nucleus mass.
    pub p: f64,
    pub temperature: f64,
    /// Cap on generated tokens; the context length always bounds it too.
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            p: 0.9,
            temperature: 1.0,
            max_len: None,
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self, context_len: usize) -> Result<(), CaptionError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(CaptionError::Policy(format!("nucleus mass {} outside (0, 1]", self.p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CaptionError::Policy(format!("temperature {} must be positive", self.temperature)));
        }
        match self.max_len {
            Some(m) if m == 0 || m > context_len => Err(CaptionError::Policy(format!("max length {m} outside 1..={context_len}"))),
            _ => Ok(()),
        }
    }
}

/// Starting tokens and halting set for one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    /// Prompt ids in reading order, without framing tokens.
    pub prompt: Vec<usize>,
    pub stop: Vec<usize>,
    pub direction: Direction,
}

impl PromptSpec {
    pub fn from_text(text: &str, vocab: &Vocabulary, stop: Vec<usize>, direction: Direction) -> Self {
        PromptSpec {
            prompt: tokenize(text, vocab),
            stop,
            direction,
        }
    }
}

/// Anything that scores the next token given a prefix in processing order.
pub trait TokenModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    fn next_token_logits(&self, ids: &[usize], direction: Direction) -> Result<Vec<f64>, CaptionError>;
}

/// A trained model conditioned on one encoded image.
pub struct ImageConditioned<'a> {
    pub params: &'a ModelParams<f32>,
    pub visual: VisualFeatures<f32>,
}

impl<'a> ImageConditioned<'a> {
    pub fn new(params: &'a ModelParams<f32>, image: &[f32]) -> Result<Self, CaptionError> {
        Ok(ImageConditioned {
            params,
            visual: params.encode_image(image)?,
        })
    }
}

impl TokenModel for ImageConditioned<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.params.config().context_len
    }

    fn next_token_logits(&self, ids: &[usize], direction: Direction) -> Result<Vec<f64>, CaptionError> {
        let logits = self.params.next_token_logits(&self.visual, ids, direction)?;
        Ok(logits.into_iter().map(f64::from).collect())
    }
}

fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Token ids of the nucleus: the shortest descending-probability prefix
/// (ties by lower id) whose mass reaches `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<usize>, CaptionError> {
    if probs.is_empty() {
        return Err(CaptionError::Distribution("empty".into()));
    }
    if probs.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CaptionError::Distribution("negative or non-finite probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CaptionError::Distribution(format!("sums to {total}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(CaptionError::Distribution(format!("nucleus mass {p} outside (0, 1]")));
    }
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for id in ranked(probs) {
        if probs[id] == 0.0 {
            break;
        }
        kept.push(id);
        mass += probs[id];
        if mass >= p - 1e-12 {
            break;
        }
    }
    Ok(kept)
}

pub fn nucleus_sample(probs: &[f64], p: f64, rng: &mut ChaCha8Rng) -> Result<usize, CaptionError> {
    let kept = nucleus(probs, p)?;
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    for &id in &kept {
        cum += probs[id];
        if u < cum {
            return Ok(id);
        }
    }
    Ok(*kept.last().expect("nucleus is never empty"))
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(logits: &[f64]) -> usize {
    ranked(logits)[0]
}

/// Generates a caption from a prompt. Forward output reads `[SOS] prompt
/// continuation`; backward output reads `continuation prompt [SEP]` after the
/// generated tokens are restored to reading order. Generation halts after
/// emitting a stop token or after the token budget is spent.
pub fn autoregressive_caption<M: TokenModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    spec: &PromptSpec,
    policy: &SamplingPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence, CaptionError> {
    let context = model.context_len();
    policy.validate(context)?;
    if spec.stop.is_empty() {
        return Err(CaptionError::Policy("stop set is empty".into()));
    }
    if spec.prompt.len() + 1 >= context {
        return Err(CaptionError::PromptTooLong {
            len: spec.prompt.len(),
            context,
        });
    }
    let room = context - 1 - spec.prompt.len();
    let budget = policy.max_len.map_or(room, |m| m.min(room));
    let mut ids = match spec.direction {
        Direction::Forward => {
            let mut ids = vec![vocab.sos()];
            ids.extend(&spec.prompt);
            ids
        }
        Direction::Backward => {
            let mut ids = vec![vocab.sep()];
            ids.extend(spec.prompt.iter().rev());
            ids
        }
    };
    for _ in 0..budget {
        let logits = model.next_token_logits(&ids, spec.direction)?;
        if logits.len() != model.vocab_size() {
            return Err(CaptionError::Length {
                expected: model.vocab_size(),
                got: logits.len(),
            });
        }
        let next = if policy.temperature < GREEDY_TEMPERATURE {
            argmax(&logits)
        } else {
            nucleus_sample(&softmax(&logits, policy.temperature), policy.p, rng)?
        };
        ids.push(next);
        if spec.stop.contains(&next) {
            break;
        }
    }
    if spec.direction == Direction::Backward {
        ids.reverse();
    }
    Ok(TokenSequence::unpadded(ids))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    Unprompted,
    Prompted,
    Iterative,
}

impl std::str::FromStr for ReportMode {
    type Err = CaptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unprompted" => Ok(ReportMode::Unprompted),
            "prompted" => Ok(ReportMode::Prompted),
            "iterative" => Ok(ReportMode::Iterative),
            other => Err(CaptionError::Policy(format!("unknown report mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub image: String,
    pub mode: ReportMode,
    pub prompts: Vec<String>,
    pub sentences: Vec<String>,
    pub text: String,
    /// Set when prompt selection came back empty and the report is unprompted.
    pub fallback: bool,
}

impl GeneratedReport {
    fn new(mode: ReportMode, prompts: Vec<String>, sentences: Vec<String>) -> Self {
        GeneratedReport {
            image: String::new(),
            mode,
            prompts,
            text: sentences.join(" "),
            sentences,
            fallback: false,
        }
    }
}

pub fn unprompted_report<M: TokenModel + ?Sized>(model: &M, vocab: &Vocabulary, policy: &SamplingPolicy) -> Result<GeneratedReport, CaptionError> {
    let spec = PromptSpec {
        prompt: Vec::new(),
        stop: vec![vocab.sep()],
        direction: Direction::Forward,
    };
    let mut rng = SeedTree::new(policy.seed).named("unprompted").rng();
    let out = autoregressive_caption(model, vocab, &spec, policy, &mut rng)?;
    let text = detokenize(&out.ids, vocab)?;
    let sentences = split_sentences(&text).into_iter().map(|s| format!("{s}.")).collect();
    Ok(GeneratedReport::new(ReportMode::Unprompted, Vec::new(), sentences))
}

fn sentence_stops(vocab: &Vocabulary) -> Vec<usize> {
    vec![vocab.stop(), vocab.sep()]
}

/// Prompt ids followed by the forward continuation, `[SOS]` and `[SEP]` dropped.
fn prompted_sentence<M: TokenModel + ?Sized>(model: &M, vocab: &Vocabulary, prompt: &str, policy: &SamplingPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, CaptionError> {
    let spec = PromptSpec::from_text(prompt, vocab, sentence_stops(vocab), Direction::Forward);
    if spec.prompt.is_empty() {
        return Err(CaptionError::EmptyPrompt);
    }
    let out = autoregressive_caption(model, vocab, &spec, policy, rng)?;
    Ok(out.ids[1..].iter().copied().filter(|&t| t != vocab.sep()).collect())
}

fn check_prompts(prompts: &[String]) -> Result<(), CaptionError> {
    if prompts.is_empty() || prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(CaptionError::EmptyPrompt);
    }
    Ok(())
}

/// One forward sentence per prompt, in prompt order.
pub fn prompted_report<M: TokenModel + ?Sized>(model: &M, vocab: &Vocabulary, prompts: &[String], policy: &SamplingPolicy) -> Result<GeneratedReport, CaptionError> {
    check_prompts(prompts)?;
    let root = SeedTree::new(policy.seed).named("prompted");
    let mut sentences = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let ids = prompted_sentence(model, vocab, prompt, policy, &mut root.child(i as u64).rng())?;
        sentences.push(detokenize(&ids, vocab)?);
    }
    Ok(GeneratedReport::new(ReportMode::Prompted, prompts.to_vec(), sentences))
}

/// Prompted sentences extended leftwards by the backward decoder, which is
/// seeded with the whole forward sentence and halts at a sentence boundary.
pub fn iterative_prompted_report<M: TokenModel + ?Sized>(model: &M, vocab: &Vocabulary, prompts: &[String], policy: &SamplingPolicy) -> Result<GeneratedReport, CaptionError> {
    check_prompts(prompts)?;
    let root = SeedTree::new(policy.seed);
    let stops = [vocab.stop(), vocab.sos(), vocab.sep()];
    let mut sentences = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let forward = prompted_sentence(model, vocab, prompt, policy, &mut root.named("prompted").child(i as u64).rng())?;
        let mut ids = forward.clone();
        if forward.len() + 1 < model.context_len() {
            let spec = PromptSpec {
                prompt: forward.clone(),
                stop: stops.to_vec(),
                direction: Direction::Backward,
            };
            let out = autoregressive_caption(model, vocab, &spec, policy, &mut root.named("iterative").child(i as u64).rng())?;
            let generated = &out.ids[..out.ids.len() - 1 - forward.len()];
            let prefix = generated.iter().copied().skip_while(|t| stops.contains(t));
            ids = prefix.chain(forward).collect();
        }
        sentences.push(detokenize(&ids, vocab)?);
    }
    Ok(GeneratedReport::new(ReportMode::Iterative, prompts.to_vec(), sentences))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub prompts: Vec<String>,
    pub fallback: bool,
}

/// Class names whose probability reaches the threshold, in class order. With
/// `negative` the below-threshold classes are returned as "no {class}" instead.
pub fn select_prompts(probabilities: &[f64], thresholds: &[f64], names: &[String], negative: bool) -> Result<PromptSelection, CaptionError> {
    for got in [probabilities.len(), thresholds.len()] {
        if got != names.len() {
            return Err(CaptionError::Length { expected: names.len(), got });
        }
    }
    let prompts: Vec<String> = names
        .iter()
        .zip(probabilities.iter().zip(thresholds))
        .filter(|(_, (p, t))| (p >= t) != negative)
        .map(|(n, _)| if negative { format!("no {n}") } else { n.clone() })
        .collect();
    Ok(PromptSelection {
        fallback: prompts.is_empty(),
        prompts,
    })
}

/// Runs the requested mode, falling back to an unprompted report when a
/// prompted mode receives no prompts.
pub fn generate_report<M: TokenModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    mode: ReportMode,
    prompts: &[String],
    policy: &SamplingPolicy,
) -> Result<GeneratedReport, CaptionError> {
    match mode {
        ReportMode::Unprompted => unprompted_report(model, vocab, policy),
        _ if prompts.is_empty() => Ok(GeneratedReport {
            fallback: true,
            ..unprompted_report(model, vocab, policy)?
        }),
        ReportMode::Prompted => prompted_report(model, vocab, prompts, policy),
        ReportMode::Iterative => iterative_prompted_report(model, vocab, prompts, policy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_examples() {
        assert_eq!(nucleus(&[0.5, 0.3, 0.2], 0.7).unwrap(), vec![0, 1]);
        assert_eq!(nucleus(&[0.9, 0.1], 0.5).unwrap(), vec![0]);
        assert_eq!(nucleus(&[0.0, 1.0, 0.0], 0.3).unwrap(), vec![1]);
        assert_eq!(nucleus(&[0.25, 0.5, 0.25], 0.6).unwrap(), vec![1, 0]);
        assert!(nucleus(&[0.5, 0.4], 0.9).is_err());
        assert!(nucleus(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn one_hot_always_wins() {
        let mut rng = SeedTree::new(3).rng();
        for p in [0.1, 0.5, 1.0] {
            assert_eq!(nucleus_sample(&[0.0, 0.0, 1.0], p, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn select_prompt_examples() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = select_prompts(&[0.7, 0.2, 0.9], &[0.5, 0.5, 0.95], &names, false).unwrap();
        assert_eq!(s.prompts, vec!["a"]);
        assert!(!s.fallback);
        let s = select_prompts(&[0.0; 3], &[0.5; 3], &names, false).unwrap();
        assert!(s.prompts.is_empty() && s.fallback);
        assert_eq!(select_prompts(&[1.0; 3], &[0.5; 3], &names, false).unwrap().prompts, names);
        assert_eq!(select_prompts(&[0.7, 0.2, 0.9], &[0.5; 3], &names, true).unwrap().prompts, vec!["no b"]);
        assert!(select_prompts(&[0.1], &[0.5; 3], &names, false).is_err());
    }
}
