mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use common::http::serve;
use proptest::prelude::*;
use statute_core::corpus::{CaseDescription, Dataset, Split, StatuteRegistry};
use statute_core::embeddings::{
    embed_dataset, embed_texts, random_statute_embeddings, EmbedError, EmbeddedCorpus, EmbeddingCache,
    EmbeddingMatrix, EmbeddingProvider, HashingEmbedder, HttpEmbeddingProvider, PrecomputedProvider,
};

/// Wraps a provider and counts the texts it is asked to embed.
struct Counting<P> {
    inner: P,
    texts: AtomicUsize,
}

impl<P: EmbeddingProvider> EmbeddingProvider for Counting<P> {
    fn identity(&self) -> &str {
        self.inner.identity()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed_batch(texts)
    }
}

fn tiny_dataset() -> Dataset {
    let registry = StatuteRegistry::from_pairs((0..10).map(|i| (format!("S{i}"), format!("content of statute {i}")))).unwrap();
    let case = |id: &str, n: usize, split| CaseDescription {
        case_id: id.into(),
        sentences: (0..n).map(|j| format!("{id} sentence {j} on ## ####")).collect(),
        gold_labels: [0].into(),
        split,
    };
    Dataset {
        registry,
        train: vec![case("a", 5, Split::Train), case("b", 3, Split::Train)],
        dev: vec![case("c", 1, Split::Dev)],
        test: vec![case("d", 7, Split::Test)],
    }
}

#[test]
fn rerun_on_unchanged_dataset_hits_the_disk_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = tiny_dataset();
    let provider = Counting {
        inner: HashingEmbedder::new(24, 1),
        texts: AtomicUsize::new(0),
    };
    let first = {
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        embed_dataset(&provider, &cache, &d).unwrap()
    };
    assert_eq!(first.statutes.rows(), 10);
    assert_eq!(first.statutes.cols(), 24);
    assert_eq!(first.case("a").unwrap().rows(), 5);
    assert!(provider.texts.load(Ordering::SeqCst) > 0);

    provider.texts.store(0, Ordering::SeqCst);
    let cache = EmbeddingCache::open(dir.path()).unwrap();
    let second = embed_dataset(&provider, &cache, &d).unwrap();
    assert_eq!(provider.texts.load(Ordering::SeqCst), 0, "every text should come from the cache");
    assert_eq!(first, second);
}

#[test]
fn embedded_corpus_round_trips_through_disk() {
    let d = tiny_dataset();
    let corpus = embed_dataset(&HashingEmbedder::new(8, 2), &EmbeddingCache::in_memory(), &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let texts: HashMap<&str, &[String]> = d.cases().map(|c| (c.case_id.as_str(), c.sentences.as_slice())).collect();
    corpus.save(dir.path(), &d.registry.contents(), &texts, None).unwrap();
    let back = EmbeddedCorpus::load(dir.path()).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back.num_cases(), 4);
}

#[test]
fn precomputed_provider_serves_matching_rows() {
    let texts: Vec<String> = vec!["alpha".into(), "beta".into(), "gamma".into()];
    let m = EmbeddingMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.emb");
    PrecomputedProvider::write(&path, &texts, &m).unwrap();
    let p = PrecomputedProvider::open(&path).unwrap();
    let cache = EmbeddingCache::in_memory();
    let got = embed_texts(&p, &cache, &["gamma".to_string(), "alpha".to_string()]).unwrap();
    assert_eq!(got.row(0), &[5.0, 6.0]);
    assert_eq!(got.row(1), &[1.0, 2.0]);
    assert!(matches!(
        embed_texts(&p, &cache, &["delta".to_string()]),
        Err(EmbedError::MissingText(_))
    ));
}

#[test]
fn http_provider_speaks_the_embed_protocol() {
    let (url, server) = serve(vec![(200, r#"{"dim": 3, "vectors": [[0.5, 0.25, 1.0], [1, 2, 3]]}"#.into())]);
    let p = HttpEmbeddingProvider::new(&url, "mock-encoder", 3, 1);
    let got = embed_texts(&p, &EmbeddingCache::in_memory(), &["one".to_string(), "two".to_string()]).unwrap();
    assert_eq!(got.row(0), &[0.5, 0.25, 1.0]);
    assert_eq!(got.row(1), &[1.0, 2.0, 3.0]);
    let bodies = server.join().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(sent, serde_json::json!({"texts": ["one", "two"]}));
}

#[test]
fn http_provider_rejects_wrong_dimension() {
    let (url, server) = serve(vec![(200, r#"{"dim": 512, "vectors": [[0.0]]}"#.into())]);
    let p = HttpEmbeddingProvider::new(&url, "mock", 768, 1);
    let err = embed_texts(&p, &EmbeddingCache::in_memory(), &["x".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::DimensionMismatch { expected: 768, got: 512 }), "{err}");
    server.join().unwrap();
}

#[test]
fn unreachable_service_is_reported() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let p = HttpEmbeddingProvider::new(&url, "mock", 4, 1);
    let err = embed_texts(&p, &EmbeddingCache::in_memory(), &["x".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::ProviderUnavailable(_)), "{err}");
}

#[test]
fn random_statute_matrices_are_seeded() {
    assert_eq!(random_statute_embeddings(10, 768, 7), random_statute_embeddings(10, 768, 7));
    assert_ne!(random_statute_embeddings(10, 768, 7), random_statute_embeddings(10, 768, 8));
    let m = random_statute_embeddings(100, 768, 7);
    assert!(m.as_slice().iter().all(|v| *v > -1.0 && *v < 1.0));
}

proptest! {
    #[test]
    fn cached_vectors_are_bit_identical(texts in proptest::collection::vec("[a-z0-9 ]{1,30}", 1..12), seed in 0u64..100) {
        let texts: Vec<String> = texts.into_iter().filter(|t| !t.trim().is_empty()).collect();
        prop_assume!(!texts.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = HashingEmbedder::new(16, seed);
        let fresh = embed_texts(&p, &EmbeddingCache::open(dir.path()).unwrap(), &texts).unwrap();
        let cached = embed_texts(&p, &EmbeddingCache::open(dir.path()).unwrap(), &texts).unwrap();
        let bits = |m: &EmbeddingMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&fresh), bits(&cached));
        for (i, t) in texts.iter().enumerate() {
            let direct = p.embed_one(t);
            prop_assert_eq!(fresh.row(i), direct.as_slice());
        }
    }
}
