//! Shared fixtures for the benchmark suite: a small corpus and matching
//! models, sized so a single iteration stays in the low-millisecond range.

use planlm_core::actions::{encode_corpus_sentences, fit_kmeans, oracle_actions};
use planlm_core::corpus::{generate_synthetic, SyntheticConfig};
use planlm_core::rng::stream;
use planlm_core::{
    ActionVocabulary, ConditionedLM, LmConfig, PlannerConfig, PlannerModel, SegmentedCorpus,
    SentenceEncoder, Split, VOCAB_SIZE,
};

pub struct BenchSetup {
    pub corpus: SegmentedCorpus,
    pub encoder: SentenceEncoder,
    pub vocab: ActionVocabulary,
    pub oracle: Vec<Vec<usize>>,
    pub planner: PlannerModel<f32>,
    pub lm: ConditionedLM<f32>,
}

pub fn bench_setup() -> BenchSetup {
    let syn = SyntheticConfig {
        docs: 40,
        min_sentences: 4,
        max_sentences: 10,
    };
    let texts = generate_synthetic(&syn, &mut stream(901, "bench-synth"));
    let corpus = SegmentedCorpus::build(&texts, 64, 902, 0.1, 0.1).unwrap();

    let encoder = SentenceEncoder::new(256, 16, 903);
    let docs: Vec<_> = corpus
        .doc_indices(Split::Train)
        .iter()
        .map(|&i| &corpus.documents[i])
        .collect();
    let (embeddings, _) = encode_corpus_sentences(&docs, &encoder, 64).unwrap();
    let vocab = fit_kmeans(&embeddings, 8, 904, encoder.fingerprint()).unwrap().vocab;
    let oracle: Vec<Vec<usize>> = corpus
        .documents
        .iter()
        .map(|d| oracle_actions(d, &encoder, &vocab).unwrap())
        .collect();

    let planner = PlannerModel::new(
        PlannerConfig {
            vocab: VOCAB_SIZE,
            dim: 32,
            heads: 2,
            layers: 1,
            k: 8,
            max_sentences: 64,
        },
        &mut stream(905, "bench-planner"),
    )
    .unwrap();
    let mut lm = ConditionedLM::new(
        LmConfig {
            vocab: VOCAB_SIZE,
            dim: 32,
            heads: 2,
            layers: 2,
            context: 64,
            adapter_layers: vec![1],
            k: 8,
            embed_dim: 16,
        },
        &mut stream(906, "bench-lm"),
    )
    .unwrap();
    lm.init_action_embeddings(&vocab.centroids).unwrap();

    BenchSetup {
        corpus,
        encoder,
        vocab,
        oracle,
        planner,
        lm,
    }
}
