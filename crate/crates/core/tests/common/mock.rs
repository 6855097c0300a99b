//! A deterministic stand-in for a trained decoder.

use bicap_core::caption::{CaptionError, TokenModel};
use bicap_core::model::Direction;
use bicap_core::numerics::SeedTree;
use bicap_core::textpipe::{Vocabulary, PAD, SEP, SOS, STOP, UNK};
use rand::Rng;

pub fn word_vocab() -> Vocabulary {
    let words = [
        "no", "edema", "mild", "moderate", "effusion", "small", "large", "there", "is", "clear", "lungs", "are", "heart", "normal", "size",
        "left", "right", "basal", "opacity", "device", "in", "place",
    ];
    Vocabulary::from_tokens([PAD, SOS, SEP, UNK, STOP].into_iter().chain(words)).unwrap()
}

/// Pseudo-random logits keyed on the whole prefix; `bias` is added to the
/// logit of `favored` in the matching direction.
pub struct HashModel {
    pub vocab_size: usize,
    pub context: usize,
    pub seed: u64,
    pub favored: usize,
    pub forward_bias: f64,
    pub backward_bias: f64,
}

impl HashModel {
    pub fn new(vocab: &Vocabulary, context: usize, seed: u64) -> Self {
        HashModel {
            vocab_size: vocab.len(),
            context,
            seed,
            favored: vocab.stop(),
            forward_bias: 1.5,
            backward_bias: 1.5,
        }
    }
}

impl TokenModel for HashModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context
    }

    fn next_token_logits(&self, ids: &[usize], direction: Direction) -> Result<Vec<f64>, CaptionError> {
        let mut key = SeedTree::new(self.seed).child(direction as u64);
        for &id in ids {
            key = key.child(id as u64);
        }
        let mut rng = key.rng();
        let mut logits: Vec<f64> = (0..self.vocab_size).map(|_| rng.random_range(-2.0..2.0)).collect();
        logits[self.favored] += match direction {
            Direction::Forward => self.forward_bias,
            Direction::Backward => self.backward_bias,
        };
        Ok(logits)
    }
}
