//! Fixtures shared by the benchmarks.

use malvis_core::binformat::{default_corpus_spec, generate_corpus, Binary};
use malvis_core::nn::{Hyperparams, Model, ModelConfig};

/// A few samples per family of the default corpus.
pub fn sample_corpus() -> Vec<Binary> {
    generate_corpus(&default_corpus_spec().scaled(0.02), 1).expect("default spec is valid")
}

pub fn classes() -> Vec<String> {
    ["aster", "bramble", "cobalt", "dune", "ember"].map(String::from).to_vec()
}

/// The default architecture at 64x64.
pub fn full_model() -> Model<f32> {
    Model::new(ModelConfig {
        hyper: Hyperparams::default(),
        input_side: 64,
        classes: classes(),
        seed: 1,
    })
    .expect("default config is valid")
}
