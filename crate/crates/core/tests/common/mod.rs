//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use steerlab::corpus::{synth_corpus, MarkerSpec, PaperRecord};
use steerlab::model::{ModelConfig, Proposer, Vocab};
use steerlab::pipeline::build_vocab;
use steerlab::rng::rng_from;
use steerlab::steer::AdapterSet;

pub fn tiny_vocab() -> Vocab {
    let corpus = synth_corpus(3, 40, &MarkerSpec::default());
    build_vocab(&corpus, 512).unwrap()
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 16,
        heads: 2,
        context_len: 48,
        vocab_size: 0,
        seed,
    }
}

pub fn tiny_model(seed: u64) -> Proposer {
    Proposer::new(tiny_config(seed), tiny_vocab()).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(&[seed, 0xa11]);
    let n = Normal::new(0.0, scale).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
}

/// Adapters with random matrices on `layers`.
pub fn random_adapters(width: usize, layers: &[usize], scale: f64, seed: u64) -> AdapterSet {
    let mut set = AdapterSet::zeros(width, layers);
    for (i, a) in set.adapters.iter_mut().enumerate() {
        a.w = random_matrix(width, width, scale, seed + i as u64);
    }
    set
}

pub fn random_tokens(vocab_size: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(&[seed, 0x70c]);
    let mut t = vec![steerlab::model::vocab::BOS];
    t.extend((1..len).map(|_| rng.gen_range(5..vocab_size)));
    t
}

pub fn some_paper() -> PaperRecord {
    synth_corpus(3, 4, &MarkerSpec::default()).papers[0].clone()
}
