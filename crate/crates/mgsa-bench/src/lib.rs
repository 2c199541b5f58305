//! Shared fixtures for the encoder benchmarks: a small but fully featured
//! model configuration and a deterministic treebanked sentence.

use mgsa_core::attention::ModelConfig;
use mgsa_core::partition::GranularitySpec;
use mgsa_core::phrase::InteractionKind;
use mgsa_core::treebank::{generate_corpus, LabeledExample, SentenceGrammar};

pub fn word_only_config() -> ModelConfig {
    let mut config = ModelConfig::new(64);
    config.d_model = 32;
    config.n_heads = 4;
    config.n_layers = 2;
    config.d_ff = 128;
    config.max_len = 64;
    config.mg_layers = vec![0, 1];
    config
}

pub fn syntactic_config() -> ModelConfig {
    let mut config = word_only_config();
    config.granularities = vec![
        GranularitySpec::WordLevel,
        GranularitySpec::SyntacticLayer(1),
        GranularitySpec::SyntacticLayer(2),
        GranularitySpec::SyntacticLayer(3),
    ];
    config.interaction = InteractionKind::OrderedNeuronsChain;
    config.tag_vocab = 8;
    config
}

/// Deterministic sentences in the 10-to-16 token band, with parse trees.
pub fn sample_sentences(count: usize) -> Vec<LabeledExample> {
    generate_corpus(&SentenceGrammar::toy_english(), count, (10, 16), 99)
        .expect("benchmark corpus generates")
}

/// Token ids for an example, folded into the configured vocabulary.
pub fn token_ids(ex: &LabeledExample, vocab: usize) -> Vec<usize> {
    ex.tokens.iter().enumerate().map(|(i, _)| i % vocab).collect()
}
