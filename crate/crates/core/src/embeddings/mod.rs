//! Sentence and statute embeddings: pluggable providers, a persistent cache,
//! and the on-disk embedded corpus consumed by the model.

mod cache;
mod matrix;
mod providers;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use cache::{cache_key, text_hash, EmbeddingCache};
pub use matrix::{sidecar_path, EmbeddingMatrix, MatrixIndex, MATRIX_MAGIC};
pub use providers::{
    random_statute_embeddings, EmbeddingProvider, HashingEmbedder, HttpEmbeddingProvider,
    PrecomputedProvider,
};

use crate::corpus::{CaseDescription, Dataset, Split};

/// Misses are sent to the provider in chunks of this many texts.
const BATCH_SIZE: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider declared dimension {expected} but returned {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned a non-finite value")]
    NonFinite,
    #[error("no precomputed vector for text {0:?}")]
    MissingText(String),
    #[error("empty text cannot be embedded")]
    EmptyText,
    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("no embeddings for case {0}")]
    UnknownCase(String),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn validate(provider: &dyn EmbeddingProvider, v: &[f32]) -> Result<(), EmbedError> {
    if v.len() != provider.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: provider.dim(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    Ok(())
}

/// Embeds `texts` in order, serving repeats from `cache` and storing every
/// fresh vector. Duplicate texts within the call reach the provider once.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    texts: &[String],
) -> Result<EmbeddingMatrix, EmbedError> {
    let id = provider.identity();
    let mut found: HashMap<&str, std::sync::Arc<[f32]>> = HashMap::new();
    let mut misses: Vec<String> = Vec::new();
    for t in texts {
        if t.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        if found.contains_key(t.as_str()) || misses.iter().any(|m| m == t) {
            continue;
        }
        match cache.get(id, t)? {
            Some(v) => {
                found.insert(t, v);
            }
            None => misses.push(t.clone()),
        }
    }

    if !misses.is_empty() {
        let chunks: Vec<&[String]> = misses.chunks(BATCH_SIZE).collect();
        let run = |chunk: &&[String]| provider.embed_batch(chunk);
        let results: Vec<Result<Vec<Vec<f32>>, EmbedError>> =
            if provider.max_in_flight() <= 1 || chunks.len() == 1 {
                chunks.iter().map(run).collect()
            } else {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(provider.max_in_flight())
                    .build()
                    .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?
                    .install(|| chunks.par_iter().map(run).collect())
            };
        for (chunk, result) in chunks.iter().zip(results) {
            let vectors = result?;
            if vectors.len() != chunk.len() {
                return Err(EmbedError::ProviderUnavailable(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    chunk.len()
                )));
            }
            for (text, v) in chunk.iter().zip(vectors) {
                validate(provider, &v)?;
                cache.insert(id, text, &v)?;
            }
        }
        for t in &misses {
            let v = cache.get(id, t)?.expect("inserted above");
            found.insert(t.as_str(), v);
        }
    }

    let mut data = Vec::with_capacity(texts.len() * provider.dim());
    for t in texts {
        data.extend_from_slice(&found[t.as_str()]);
    }
    Ok(EmbeddingMatrix::new(texts.len(), provider.dim(), data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseEntry {
    case_id: String,
    split: Split,
    file: String,
    rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusIndex {
    provider: String,
    dim: usize,
    statutes: String,
    cases: Vec<CaseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Value>,
}

/// Statute matrix plus one sentence matrix per case.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedCorpus {
    pub provider: String,
    pub dim: usize,
    pub statutes: EmbeddingMatrix,
    cases: BTreeMap<String, (Split, EmbeddingMatrix)>,
}

impl EmbeddedCorpus {
    pub fn new(provider: String, dim: usize, statutes: EmbeddingMatrix) -> Self {
        Self {
            provider,
            dim,
            statutes,
            cases: BTreeMap::new(),
        }
    }

    pub fn insert_case(
        &mut self,
        case_id: &str,
        split: Split,
        matrix: EmbeddingMatrix,
    ) -> Result<(), EmbedError> {
        if self.cases.contains_key(case_id) {
            return Err(EmbedError::DuplicateCase(case_id.to_string()));
        }
        self.cases.insert(case_id.to_string(), (split, matrix));
        Ok(())
    }

    pub fn case(&self, case_id: &str) -> Result<&EmbeddingMatrix, EmbedError> {
        self.cases
            .get(case_id)
            .map(|(_, m)| m)
            .ok_or_else(|| EmbedError::UnknownCase(case_id.to_string()))
    }

    pub fn num_cases(&self) -> usize {
        self.cases.len()
    }

    fn case_file(case_id: &str) -> String {
        format!(
            "cases/{}.emb",
            &hex::encode(Sha256::digest(case_id.as_bytes()))[..16]
        )
    }

    /// Writes `statutes.emb`, `cases/*.emb` (each with its sidecar) and `index.json`.
    pub fn save(
        &self,
        dir: &Path,
        statute_texts: &[String],
        case_texts: &HashMap<&str, &[String]>,
        provenance: Option<&Value>,
    ) -> Result<(), EmbedError> {
        let sidecar = |texts: &[String]| MatrixIndex {
            rows: texts.iter().map(|t| text_hash(t)).collect(),
            provider: Some(self.provider.clone()),
            provenance: provenance.cloned(),
        };
        let statutes_path = dir.join("statutes.emb");
        self.statutes.save(&statutes_path)?;
        sidecar(statute_texts).save(&statutes_path)?;
        let mut entries = Vec::new();
        for (case_id, (split, m)) in &self.cases {
            let file = Self::case_file(case_id);
            let path = dir.join(&file);
            m.save(&path)?;
            if let Some(texts) = case_texts.get(case_id.as_str()) {
                sidecar(texts).save(&path)?;
            }
            entries.push(CaseEntry {
                case_id: case_id.clone(),
                split: *split,
                file,
                rows: m.rows(),
            });
        }
        let index = CorpusIndex {
            provider: self.provider.clone(),
            dim: self.dim,
            statutes: "statutes.emb".into(),
            cases: entries,
            provenance: provenance.cloned(),
        };
        std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EmbedError> {
        let index_path = dir.join("index.json");
        let bytes = std::fs::read(&index_path)
            .map_err(|e| EmbedError::Format(format!("{}: {e}", index_path.display())))?;
        let index: CorpusIndex = serde_json::from_slice(&bytes)?;
        let statutes = EmbeddingMatrix::load(&dir.join(&index.statutes))?;
        let mut corpus = Self::new(index.provider, index.dim, statutes);
        for entry in index.cases {
            let m = EmbeddingMatrix::load(&dir.join(&entry.file))?;
            if m.rows() != entry.rows || m.cols() != index.dim {
                return Err(EmbedError::Format(format!(
                    "case {}: expected {}x{}, found {}x{}",
                    entry.case_id,
                    entry.rows,
                    index.dim,
                    m.rows(),
                    m.cols()
                )));
            }
            corpus.insert_case(&entry.case_id, entry.split, m)?;
        }
        Ok(corpus)
    }
}

/// Pairs each case with its embedded sentences as a training example.
pub fn examples(
    cases: &[CaseDescription],
    corpus: &EmbeddedCorpus,
) -> Result<Vec<crate::model::Example>, EmbedError> {
    cases
        .iter()
        .map(|c| {
            Ok(crate::model::Example {
                case_id: c.case_id.clone(),
                sentences: corpus.case(&c.case_id)?.to_f64(),
                gold: c.gold_labels.clone(),
            })
        })
        .collect()
}

/// Embeds every statute content and every case sentence of `dataset`.
/// The dataset is expected to be masked and truncated already.
pub fn embed_dataset(
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    dataset: &Dataset,
) -> Result<EmbeddedCorpus, EmbedError> {
    let statutes = embed_texts(provider, cache, &dataset.registry.contents()).map_err(|e| {
        EmbedError::Case {
            case_id: "<statutes>".into(),
            source: Box::new(e),
        }
    })?;
    let cases: Vec<&CaseDescription> = dataset.cases().collect();
    let embed_case = |c: &&CaseDescription| {
        embed_texts(provider, cache, &c.sentences).map_err(|e| EmbedError::Case {
            case_id: c.case_id.clone(),
            source: Box::new(e),
        })
    };
    let matrices: Vec<Result<EmbeddingMatrix, EmbedError>> = if provider.max_in_flight() <= 1 {
        cases.iter().map(embed_case).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(provider.max_in_flight())
            .build()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?
            .install(|| cases.par_iter().map(embed_case).collect())
    };
    let mut corpus = EmbeddedCorpus::new(provider.identity().to_string(), provider.dim(), statutes);
    for (case, m) in cases.iter().zip(matrices) {
        corpus.insert_case(&case.case_id, case.split, m?)?;
    }
    Ok(corpus)
}
