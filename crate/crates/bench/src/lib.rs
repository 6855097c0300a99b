//! Fixtures shared by the benchmarks.

use bicap_core::data::{corpus_vocabulary, synth_generate, SynthConfig};
use bicap_core::model::{ModelConfig, ModelParams};
use bicap_core::textpipe::{prepare_training_sequence, TokenSequence, Vocabulary};

pub struct ModelFixture {
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
    pub image: Vec<f32>,
    pub tokens: TokenSequence,
}

/// A randomly initialized desk model with one synthetic image and its report.
pub fn desk_fixture(embed_dim: usize, layers: usize) -> ModelFixture {
    let corpus = synth_generate(&SynthConfig { n: 4, ..SynthConfig::default() }).expect("synthetic corpus");
    let vocab = corpus_vocabulary(&corpus.manifest).expect("vocabulary");
    let config = ModelConfig {
        embed_dim,
        layers,
        ff_dim: 4 * embed_dim,
        ..ModelConfig::desk(vocab.len())
    };
    let params = ModelParams::init(&config, 0).expect("valid config");
    let tokens = prepare_training_sequence(&corpus.manifest.records[0].report(), &vocab, config.context_len).expect("framed report");
    let image = corpus.images[0].pixels().to_vec();
    ModelFixture { vocab, params, image, tokens }
}
