//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statute_core::llm::LlmClientConfig;
use statute_core::model::{ModelConfig, TrainerOptions};
use statute_core::synthetic;

use crate::error::UserError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelOverrides,
    pub trainer: TrainerOverrides,
    pub embedder: EmbedderConfig,
    pub llm: LlmClientConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Statute JSON-lines file (ingest).
    pub statutes: Option<PathBuf>,
    /// Split manifest (ingest).
    pub manifest: Option<PathBuf>,
    /// Ingested dataset directory holding `statutes.jsonl` and `manifest.json`.
    pub data: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub heads: Option<usize>,
    pub attn_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub positive_weight: Option<f64>,
    pub negative_weight: Option<f64>,
    pub max_sentences: Option<usize>,
}

impl ModelOverrides {
    /// Production defaults for `num_statutes` labels over `input_dim`-wide
    /// embeddings, with the overrides applied.
    pub fn resolve(&self, num_statutes: usize, input_dim: usize) -> ModelConfig {
        let mut c = ModelConfig::new(num_statutes);
        c.input_dim = input_dim;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(heads, attn_dim, hidden_dim, dropout, positive_weight, negative_weight, max_sentences);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    /// 0 disables early stopping.
    pub patience: Option<usize>,
}

impl TrainerOverrides {
    pub fn resolve(&self, seed: u64) -> TrainerOptions {
        let mut o = TrainerOptions {
            seed,
            ..TrainerOptions::default()
        };
        if let Some(v) = self.learning_rate {
            o.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            o.batch_size = v;
        }
        if let Some(v) = self.epochs {
            o.epochs = v;
        }
        if let Some(v) = self.patience {
            o.patience = (v > 0).then_some(v);
        }
        o
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Http,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Token-hashing seed of the hashing embedder.
    pub hash_seed: u64,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub in_flight: usize,
    /// Matrix file for the precomputed provider.
    pub matrix: Option<PathBuf>,
    /// Disk cache directory; defaults to `<out>/cache`.
    pub cache: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashing,
            dim: synthetic::EMBED_DIM,
            hash_seed: synthetic::EMBED_SEED,
            endpoint: None,
            model: None,
            in_flight: 4,
            matrix: None,
            cache: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, UserError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UserError(format!("invalid config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// The config `synth` writes next to its corpus: the toy recipe that makes
/// the synthetic task learnable in a few seconds.
pub fn synthetic_recipe(seed: u64) -> RunConfig {
    let m = synthetic::model_config(1);
    let t = synthetic::trainer_options(seed);
    RunConfig {
        seed: Some(seed),
        model: ModelOverrides {
            heads: Some(m.heads),
            attn_dim: Some(m.attn_dim),
            hidden_dim: Some(m.hidden_dim),
            ..Default::default()
        },
        trainer: TrainerOverrides {
            learning_rate: Some(t.learning_rate),
            batch_size: Some(t.batch_size),
            epochs: Some(t.epochs),
            patience: t.patience,
        },
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_round_trips_through_toml() {
        let c = synthetic_recipe(3);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nheadz = 2\n").is_err());
    }

    #[test]
    fn overrides_apply_on_top_of_defaults() {
        let o = ModelOverrides {
            heads: Some(2),
            ..Default::default()
        };
        let c = o.resolve(5, 16);
        assert_eq!((c.heads, c.input_dim, c.hidden_dim, c.num_statutes), (2, 16, 1536, 5));
        let t = TrainerOverrides {
            patience: Some(0),
            ..Default::default()
        }
        .resolve(4);
        assert_eq!((t.patience, t.seed, t.batch_size), (None, 4, 32));
    }
}
