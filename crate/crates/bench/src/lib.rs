//! Shared fixtures for the benchmarks.

use synccap_core::dataset::{generate_corpus, Vocab};
use synccap_core::{Model, ModelConfig, Radius, Sample};

/// A seeded corpus, its vocabulary, and a freshly initialized model of
/// width `d_model`.
pub fn fixture(n: usize, d_model: usize) -> (Vec<Sample>, Vocab, Model) {
    let corpus = generate_corpus(n, 11, 2, 3).expect("valid generator bounds");
    let captions: Vec<&str> = corpus.iter().map(|s| s.caption.as_str()).collect();
    let vocab = Vocab::build(&captions).expect("non-empty corpus");
    let cfg = ModelConfig {
        d_model,
        heads: 4,
        self_radius: Radius::Finite(10),
        cross_radius: Radius::Finite(10),
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let model = Model::new(cfg, 1).expect("valid config");
    (corpus, vocab, model)
}
