use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::text_hash;
use super::matrix::{EmbeddingMatrix, MatrixIndex};
use super::EmbedError;

/// A sentence encoder. Implementations must be deterministic: the same text
/// under the same [`identity`](EmbeddingProvider::identity) yields the same
/// vector.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity used to key the cache.
    fn identity(&self) -> &str;

    /// Declared vector dimension.
    fn dim(&self) -> usize;

    /// How many batches may be in flight at once.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn identity(&self) -> &str {
        (**self).identity()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn identity(&self) -> &str {
        (**self).identity()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

/// Bag-of-tokens feature hashing: every token maps to a fixed pseudo-random
/// direction derived from its hash, a text is the L2-normalized sum of its
/// token directions. Tokens are lowercase runs of alphanumerics and `#`.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
    identity: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            dim,
            seed,
            identity: format!("hashing-v1/d{dim}/s{seed}"),
        }
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !(c.is_alphanumeric() || c == '#'))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        for (i, b) in digest.iter().enumerate() {
            seed[i] = b ^ self.seed.to_le_bytes()[i % 8];
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for token in Self::tokens(text) {
            for (a, v) in acc.iter_mut().zip(self.token_vector(&token)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_in_flight(&self) -> usize {
        4
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Serves vectors from a matrix file whose sidecar index lists the SHA-256
/// of each row's text.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    matrix: EmbeddingMatrix,
    rows: HashMap<String, usize>,
    identity: String,
}

impl PrecomputedProvider {
    pub fn open(matrix_path: &Path) -> Result<Self, EmbedError> {
        let matrix = EmbeddingMatrix::load(matrix_path)?;
        let index = MatrixIndex::load(matrix_path)?;
        if index.rows.len() != matrix.rows() {
            return Err(EmbedError::Format(format!(
                "{}: index lists {} rows, matrix has {}",
                matrix_path.display(),
                index.rows.len(),
                matrix.rows()
            )));
        }
        let rows = index
            .rows
            .into_iter()
            .enumerate()
            .map(|(i, h)| (h, i))
            .collect();
        let mut h = Sha256::new();
        for v in matrix.as_slice() {
            h.update(v.to_le_bytes());
        }
        let identity = format!("precomputed/{}", &hex::encode(h.finalize())[..16]);
        Ok(Self {
            matrix,
            rows,
            identity,
        })
    }

    /// Builds the matrix and sidecar index for `texts`; the inverse of [`open`](Self::open).
    pub fn write(
        matrix_path: &Path,
        texts: &[String],
        vectors: &EmbeddingMatrix,
    ) -> Result<(), EmbedError> {
        assert_eq!(texts.len(), vectors.rows());
        vectors.save(matrix_path)?;
        MatrixIndex {
            rows: texts.iter().map(|t| text_hash(t)).collect(),
            provider: None,
            provenance: None,
        }
        .save(matrix_path)
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.rows
                    .get(&text_hash(t))
                    .map(|&r| self.matrix.row(r).to_vec())
                    .ok_or_else(|| EmbedError::MissingText(truncate_for_error(t)))
            })
            .collect()
    }
}

fn truncate_for_error(t: &str) -> String {
    let mut s: String = t.chars().take(60).collect();
    if s.len() < t.len() {
        s.push('…');
    }
    s
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

/// Client for a sidecar encoder: `POST {endpoint}/embed` with
/// `{"texts": [...]}` answered by `{"dim": d, "vectors": [[...], ...]}`.
pub struct HttpEmbeddingProvider {
    url: String,
    dim: usize,
    identity: String,
    in_flight: usize,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    /// `model` names the encoder behind the endpoint and becomes part of the
    /// cache identity.
    pub fn new(endpoint: &str, model: &str, dim: usize, in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            dim,
            identity: format!("http/{model}/d{dim}"),
            in_flight: in_flight.max(1),
            agent,
        }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_in_flight(&self) -> usize {
        self.in_flight
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let unavailable = |e: ureq::Error| EmbedError::ProviderUnavailable(format!("{}: {e}", self.url));
        let response: EmbedResponse = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(unavailable)?
            .body_mut()
            .read_json()
            .map_err(unavailable)?;
        if response.dim != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: response.dim,
            });
        }
        if response.vectors.len() != texts.len() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "{}: sent {} texts, got {} vectors",
                self.url,
                texts.len(),
                response.vectors.len()
            )));
        }
        Ok(response.vectors)
    }
}

/// An `n x d` matrix of i.i.d. uniform(-1, 1) draws, reproducible per seed.
/// Stands in for statute-content embeddings in ablation runs.
pub fn random_statute_embeddings(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    assert!(n >= 1 && d >= 1, "shape must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d)
        .map(|_| loop {
            let v: f32 = rng.random_range(-1.0f32..1.0);
            if v > -1.0 {
                break v;
            }
        })
        .collect();
    EmbeddingMatrix::new(n, d, data)
}
