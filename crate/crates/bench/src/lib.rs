//! Seeded inputs shared by the benchmarks under `benches/`.

use dialret::corpus::{build_corpus, encode_records, CorpusConfig, Sample};
use dialret::retrieval::VideoIndex;
use dialret::training::TrainConfig;
use dialret::{RetrievalModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Index of `n` random `dim`-d embeddings.
pub fn random_index(n: usize, dim: usize, seed: u64) -> VideoIndex {
    let mut r = rng(seed);
    VideoIndex::new((0..n).map(|i| (format!("v{i:05}"), random_vec(&mut r, dim))).collect()).expect("valid index")
}

/// Untrained desk-size model with encoded training samples.
pub fn model_and_samples(train: usize) -> (RetrievalModel, Vec<Sample>, TrainConfig) {
    let corpus = build_corpus(&CorpusConfig {
        train,
        val: 2,
        test: 2,
        ..CorpusConfig::default()
    })
    .expect("corpus");
    let cfg = TrainConfig::default();
    let vocab = corpus.vocabulary().expect("vocabulary");
    let model = RetrievalModel::new(cfg.model_for(&corpus.config), vocab, 0).expect("model");
    let samples = encode_records(&corpus.train, &model.vocab, &model.config.feature_blocks);
    (model, samples, cfg)
}
