use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use statute_core::corpus::{load_cases, CaseDescription, Dataset, Manifest, Split};
use statute_core::embeddings::EmbeddedCorpus;
use statute_core::model::Checkpoint;

use crate::config::RunConfig;
use crate::error::user_bail;

/// Everything a command needs besides its own flags.
pub struct RunContext {
    pub command: &'static str,
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunContext {
    /// Config and seed that produced an artifact. The output directory is left
    /// out so that identical runs into different directories agree.
    pub fn provenance(&self) -> Value {
        let mut config = self.config.clone();
        config.paths.out = None;
        serde_json::json!({
            "tool": "statute",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config": config,
        })
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn data_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.paths.data.clone())
            .unwrap_or_else(|| self.out.join("data"))
    }

    pub fn embeddings_dir(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.paths.embeddings.clone())
            .unwrap_or_else(|| self.out.join("embeddings"))
    }

    pub fn checkpoint_path(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.paths.checkpoint.clone())
            .unwrap_or_else(|| self.out.join("checkpoint.ckpt"))
    }
}

pub fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        user_bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let statutes = dir.join("statutes.jsonl");
    let manifest = dir.join("manifest.json");
    require(&statutes, "statute file")?;
    require(&manifest, "manifest")?;
    let manifest = Manifest::load(&manifest)?;
    Ok(Dataset::load(&statutes, &manifest)?)
}

pub fn load_embeddings(dir: &Path) -> Result<EmbeddedCorpus> {
    require(&dir.join("index.json"), "embedding index")?;
    EmbeddedCorpus::load(dir).with_context(|| format!("loading embeddings from {}", dir.display()))
}

pub fn load_checkpoint(path: &Path, dataset: &Dataset, corpus: &EmbeddedCorpus) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let names: Vec<&str> = dataset.registry.iter().map(|s| s.name.as_str()).collect();
    if ck.header.statutes != names {
        user_bail!("checkpoint {} was trained on a different statute registry", path.display());
    }
    if ck.header.config.input_dim != corpus.dim {
        user_bail!(
            "checkpoint expects {}-dim embeddings, corpus has {}",
            ck.header.config.input_dim,
            corpus.dim
        );
    }
    Ok(ck)
}

/// Cases from `--cases` if given, otherwise the chosen split. Cases read from
/// a file are masked and truncated like ingested ones.
pub fn select_cases(
    dataset: &Dataset,
    split: Split,
    cases: &Option<PathBuf>,
    max_sentences: usize,
) -> Result<Vec<CaseDescription>> {
    match cases {
        Some(path) => {
            require(path, "case file")?;
            Ok(load_cases(path, &dataset.registry, split)?
                .iter()
                .map(|c| statute_core::corpus::truncate_sentences(&c.masked(), max_sentences))
                .collect())
        }
        None => Ok(dataset.split(split).to_vec()),
    }
}

pub struct JsonLines {
    w: BufWriter<File>,
    path: PathBuf,
}

impl JsonLines {
    /// Opens `path` and writes the provenance record as its first line.
    pub fn create(path: &Path, provenance: &Value) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "{}", serde_json::json!({ "provenance": provenance }))?;
        Ok(Self {
            w,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, record)?;
        writeln!(self.w)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

/// A JSON document with a `provenance` field added at the top level.
pub fn write_json<T: Serialize>(path: &Path, value: &T, provenance: &Value) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("provenance".into(), provenance.clone());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

/// One line of a predictions file. Gold case files share the
/// `case_id`/`labels` keys, so both read through this type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub case_id: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<serde_json::Map<String, Value>>,
}

impl LabelRecord {
    pub fn label_set(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    require(path, "label file")?;
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| crate::error::UserError(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.as_object().is_some_and(|o| o.len() == 1 && o.contains_key("provenance")) {
            continue;
        }
        out.push(
            serde_json::from_value(v)
                .map_err(|e| crate::error::UserError(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
