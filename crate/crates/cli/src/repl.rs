use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::Context;
use bicap_core::caption::{iterative_prompted_report, prompted_report, unprompted_report, ImageConditioned, SamplingPolicy, TokenModel};
use bicap_core::data::read_pgm;
use bicap_core::textpipe::Vocabulary;
use bicap_core::training::{eval_input, load_checkpoint};
use clap::Args;

use crate::config::{config_error, set};

const USAGE: &str = "type a prompt for one sentence; /iterative <prompt> extends it backwards; /unprompted for a full report; /seed N to reseed; /quit to exit";

#[derive(Args)]
pub struct ReplArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM image to condition on.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

pub fn run(args: ReplArgs) -> anyhow::Result<()> {
    let mut policy = SamplingPolicy::default();
    set(&mut policy.seed, args.seed);
    set(&mut policy.p, args.p);
    set(&mut policy.temperature, args.temperature);
    set(&mut policy.max_len, args.max_len.map(Some));
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    policy.validate(ckpt.model_config.context_len).map_err(|e| config_error(e.to_string()))?;
    let vocab = ckpt.vocab()?;
    let image = read_pgm(&args.image)?;
    let pixels = eval_input(&image, ckpt.model_config.image_side, ckpt.normalization)?;
    let model = ImageConditioned::new(&ckpt.params, &pixels)?;
    let stdin = std::io::stdin();
    session(&model, &vocab, policy, stdin.lock(), std::io::stdout().lock())
}

/// Reads commands line by line until `/quit` or end of input.
pub fn session<M: TokenModel, R: BufRead, W: Write>(model: &M, vocab: &Vocabulary, mut policy: SamplingPolicy, input: R, mut out: W) -> anyhow::Result<()> {
    writeln!(out, "{USAGE}")?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        let reply = if line.is_empty() {
            USAGE.to_string()
        } else if line == "/quit" {
            break;
        } else if line == "/unprompted" {
            unprompted_report(model, vocab, &policy)?.text
        } else if let Some(rest) = line.strip_prefix("/seed") {
            match rest.trim().parse() {
                Ok(seed) => {
                    policy.seed = seed;
                    format!("seed set to {seed}")
                }
                Err(_) => "usage: /seed N".to_string(),
            }
        } else if let Some(prompt) = line.strip_prefix("/iterative") {
            let prompt = prompt.trim();
            if prompt.is_empty() {
                "usage: /iterative <prompt>".to_string()
            } else {
                iterative_prompted_report(model, vocab, &[prompt.to_string()], &policy)?.text
            }
        } else if line.starts_with('/') {
            format!("unknown command; {USAGE}")
        } else {
            prompted_report(model, vocab, &[line.to_string()], &policy)?.text
        };
        writeln!(out, "{reply}")?;
        out.flush()?;
    }
    Ok(())
}
