//! Statute registry, case descriptions and the JSON-lines formats they are
//! stored in.
//!
//! Case text is never segmented here: input files carry sentence lists.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Character every decimal digit is replaced with by [`mask_numerics`].
pub const MASK_CHAR: char = '#';

/// Default cap on sentences per case.
pub const DEFAULT_MAX_SENTENCES: usize = 150;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no statutes in {0}")]
    NoStatutes(PathBuf),
    #[error("{path}:{line}: duplicate statute name {name:?}")]
    DuplicateName {
        path: PathBuf,
        line: usize,
        name: String,
    },
    #[error("{path}:{line}: statute {name:?} has empty content")]
    EmptyContent {
        path: PathBuf,
        line: usize,
        name: String,
    },
    #[error("case {case_id}: unknown statute {label:?}")]
    UnknownStatute { case_id: String, label: String },
    #[error("case {case_id}: no sentences")]
    EmptyCase { case_id: String },
    #[error("{split} split has {actual} cases, manifest declares {expected}")]
    CountMismatch {
        split: Split,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statute {
    pub id: usize,
    pub name: String,
    pub content: String,
}

/// The label space: statutes indexed `0..N` in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatuteRegistry {
    statutes: Vec<Statute>,
    by_name: HashMap<String, usize>,
}

impl StatuteRegistry {
    /// Builds a registry from `(name, content)` pairs, assigning ids in order.
    pub fn from_pairs<I, S, T>(pairs: I) -> std::result::Result<Self, String>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut statutes = Vec::new();
        let mut by_name = HashMap::new();
        for (id, (name, content)) in pairs.into_iter().enumerate() {
            let name = name.into();
            let content = content.into();
            if content.trim().is_empty() {
                return Err(format!("statute {name:?} has empty content"));
            }
            if by_name.insert(name.clone(), id).is_some() {
                return Err(format!("duplicate statute name {name:?}"));
            }
            statutes.push(Statute { id, name, content });
        }
        if statutes.is_empty() {
            return Err("no statutes".to_string());
        }
        Ok(Self { statutes, by_name })
    }

    pub fn len(&self) -> usize {
        self.statutes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statutes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Statute> {
        self.statutes.get(id)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.statutes[id].name
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Statute> {
        self.statutes.iter()
    }

    pub fn contents(&self) -> Vec<String> {
        self.statutes.iter().map(|s| s.content.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseDescription {
    pub case_id: String,
    pub sentences: Vec<String>,
    pub gold_labels: BTreeSet<usize>,
    pub split: Split,
}

impl CaseDescription {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Applies [`mask_numerics`] to every sentence.
    pub fn masked(&self) -> Self {
        Self {
            sentences: self.sentences.iter().map(|s| mask_numerics(s)).collect(),
            ..self.clone()
        }
    }
}

/// Replaces every decimal digit with [`MASK_CHAR`], one mask per digit.
///
/// Only ASCII digits are treated as decimal digits; statute numbers in the
/// source corpora are written with them.
pub fn mask_numerics(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_digit() { MASK_CHAR } else { c })
        .collect()
}

/// Keeps the first `max_sentences` sentences of a case.
pub fn truncate_sentences(case: &CaseDescription, max_sentences: usize) -> CaseDescription {
    assert!(max_sentences >= 1, "max_sentences must be positive");
    let mut out = case.clone();
    out.sentences.truncate(max_sentences);
    out
}

#[derive(Deserialize)]
struct StatuteRecord {
    name: String,
    content: String,
}

#[derive(Serialize, Deserialize)]
struct CaseRecord {
    case_id: String,
    sentences: Vec<String>,
    labels: Vec<String>,
}

/// Iterates non-blank JSON lines, skipping `{"provenance": ...}` header
/// records written by the pipeline.
fn json_lines(path: &Path) -> Result<Vec<(usize, Value)>> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if is_provenance_record(&value) {
            continue;
        }
        out.push((line_no, value));
    }
    Ok(out)
}

pub(crate) fn is_provenance_record(value: &Value) -> bool {
    value
        .as_object()
        .is_some_and(|o| o.len() == 1 && o.contains_key("provenance"))
}

pub fn load_statutes(path: &Path) -> Result<StatuteRegistry> {
    let mut statutes = Vec::new();
    let mut by_name = HashMap::new();
    for (line, value) in json_lines(path)? {
        let record: StatuteRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        if record.content.trim().is_empty() {
            return Err(CorpusError::EmptyContent {
                path: path.to_path_buf(),
                line,
                name: record.name,
            });
        }
        let id = statutes.len();
        if by_name.insert(record.name.clone(), id).is_some() {
            return Err(CorpusError::DuplicateName {
                path: path.to_path_buf(),
                line,
                name: record.name,
            });
        }
        statutes.push(Statute {
            id,
            name: record.name,
            content: record.content,
        });
    }
    if statutes.is_empty() {
        return Err(CorpusError::NoStatutes(path.to_path_buf()));
    }
    Ok(StatuteRegistry { statutes, by_name })
}

pub fn load_cases(
    path: &Path,
    registry: &StatuteRegistry,
    split: Split,
) -> Result<Vec<CaseDescription>> {
    let mut cases = Vec::new();
    for (line, value) in json_lines(path)? {
        let record: CaseRecord = serde_json::from_value(value).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if record.sentences.is_empty() {
            return Err(CorpusError::EmptyCase {
                case_id: record.case_id,
            });
        }
        let mut gold_labels = BTreeSet::new();
        for label in &record.labels {
            let id = registry
                .id_of(label)
                .ok_or_else(|| CorpusError::UnknownStatute {
                    case_id: record.case_id.clone(),
                    label: label.clone(),
                })?;
            gold_labels.insert(id);
        }
        cases.push(CaseDescription {
            case_id: record.case_id,
            sentences: record.sentences,
            gold_labels,
            split,
        });
    }
    Ok(cases)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CorpusError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_lines<I>(path: &Path, header: Option<&Value>, lines: I) -> Result<()>
where
    I: IntoIterator<Item = Value>,
{
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = create(path)?;
    if let Some(h) = header {
        writeln!(w, "{}", serde_json::json!({ "provenance": h })).map_err(io)?;
    }
    for line in lines {
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_statutes(path: &Path, registry: &StatuteRegistry) -> Result<()> {
    write_lines(
        path,
        None,
        registry
            .iter()
            .map(|s| serde_json::json!({ "name": s.name, "content": s.content })),
    )
}

/// Writes cases in the case JSON-lines format, optionally preceded by a
/// provenance record that [`load_cases`] skips.
pub fn write_cases(
    path: &Path,
    cases: &[CaseDescription],
    registry: &StatuteRegistry,
    provenance: Option<&Value>,
) -> Result<()> {
    write_lines(
        path,
        provenance,
        cases.iter().map(|c| {
            serde_json::to_value(CaseRecord {
                case_id: c.case_id.clone(),
                sentences: c.sentences.clone(),
                labels: c
                    .gold_labels
                    .iter()
                    .map(|&id| registry.name(id).to_string())
                    .collect(),
            })
            .expect("case record serializes")
        }),
    )
}

/// `{"train": path, "dev": path, "test": path}` with optional declared counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<HashMap<Split, usize>>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?;
        // Relative split paths resolve against the manifest's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut manifest.train, &mut manifest.dev, &mut manifest.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(manifest)
    }

    pub fn path(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// A registry plus its cases. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub registry: StatuteRegistry,
    pub train: Vec<CaseDescription>,
    pub dev: Vec<CaseDescription>,
    pub test: Vec<CaseDescription>,
}

impl Dataset {
    pub fn load(statutes: &Path, manifest: &Manifest) -> Result<Self> {
        let registry = load_statutes(statutes)?;
        let dataset = Dataset {
            train: load_cases(&manifest.train, &registry, Split::Train)?,
            dev: load_cases(&manifest.dev, &registry, Split::Dev)?,
            test: load_cases(&manifest.test, &registry, Split::Test)?,
            registry,
        };
        if let Some(counts) = &manifest.counts {
            for split in Split::ALL {
                if let Some(&expected) = counts.get(&split) {
                    let actual = dataset.split(split).len();
                    if actual != expected {
                        return Err(CorpusError::CountMismatch {
                            split,
                            expected,
                            actual,
                        });
                    }
                }
            }
        }
        Ok(dataset)
    }

    pub fn split(&self, split: Split) -> &[CaseDescription] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_sizes(&self) -> [(Split, usize); 3] {
        Split::ALL.map(|s| (s, self.split(s).len()))
    }

    pub fn cases(&self) -> impl Iterator<Item = &CaseDescription> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Masks digits in every case sentence of every split. Statute contents
    /// are left untouched.
    pub fn masked(&self) -> Self {
        let mask = |cases: &[CaseDescription]| cases.iter().map(|c| c.masked()).collect();
        Dataset {
            registry: self.registry.clone(),
            train: mask(&self.train),
            dev: mask(&self.dev),
            test: mask(&self.test),
        }
    }

    pub fn truncated(&self, max_sentences: usize) -> Self {
        let cut = |cases: &[CaseDescription]| {
            cases
                .iter()
                .map(|c| truncate_sentences(c, max_sentences))
                .collect()
        };
        Dataset {
            registry: self.registry.clone(),
            train: cut(&self.train),
            dev: cut(&self.dev),
            test: cut(&self.test),
        }
    }

    /// Writes `statutes.jsonl`, one file per split and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, provenance: Option<&Value>) -> Result<Manifest> {
        write_statutes(&dir.join("statutes.jsonl"), &self.registry)?;
        let mut counts = HashMap::new();
        for split in Split::ALL {
            let file = dir.join(format!("{split}.jsonl"));
            write_cases(&file, self.split(split), &self.registry, provenance)?;
            counts.insert(split, self.split(split).len());
        }
        let manifest = Manifest {
            train: PathBuf::from("train.jsonl"),
            dev: PathBuf::from("dev.jsonl"),
            test: PathBuf::from("test.jsonl"),
            counts: Some(counts),
        };
        let path = dir.join("manifest.json");
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| CorpusError::Parse {
            path: path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        w.flush().map_err(|source| CorpusError::Io { path, source })?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn statute_lines(n: usize, prefix: &str) -> String {
        (0..n)
            .map(|i| {
                format!(
                    "{}\n",
                    serde_json::json!({"name": format!("{prefix} {i}"), "content": format!("content of {i}")})
                )
            })
            .collect()
    }

    #[test]
    fn loads_registry_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let ten = write_tmp(&dir, "echr.jsonl", &statute_lines(10, "Article"));
        let reg = load_statutes(&ten).unwrap();
        assert_eq!(reg.len(), 10);
        assert_eq!(reg.id_of("Article 3"), Some(3));
        assert!(reg.iter().enumerate().all(|(i, s)| s.id == i));

        let hundred = write_tmp(&dir, "ipc.jsonl", &statute_lines(100, "Section"));
        assert_eq!(load_statutes(&hundred).unwrap().len(), 100);
    }

    #[test]
    fn statute_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_tmp(&dir, "empty.jsonl", "");
        let err = load_statutes(&empty).unwrap_err();
        assert!(err.to_string().contains("no statutes"), "{err}");

        let dup = write_tmp(
            &dir,
            "dup.jsonl",
            "{\"name\":\"A\",\"content\":\"x\"}\n{\"name\":\"A\",\"content\":\"y\"}\n",
        );
        assert!(matches!(
            load_statutes(&dup),
            Err(CorpusError::DuplicateName { line: 2, .. })
        ));

        let blank = write_tmp(&dir, "blank.jsonl", "{\"name\":\"A\",\"content\":\"  \"}\n");
        assert!(matches!(
            load_statutes(&blank),
            Err(CorpusError::EmptyContent { line: 1, .. })
        ));

        let bad = write_tmp(&dir, "bad.jsonl", "{\"name\":\"A\",\"content\":\"x\"}\n{oops\n");
        assert!(matches!(
            load_statutes(&bad),
            Err(CorpusError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn case_errors() {
        let dir = tempfile::tempdir().unwrap();
        let reg = load_statutes(&write_tmp(&dir, "s.jsonl", &statute_lines(3, "Section"))).unwrap();
        let unknown = write_tmp(
            &dir,
            "c.jsonl",
            "{\"case_id\":\"c1\",\"sentences\":[\"a\"],\"labels\":[\"Section 9999\"]}\n",
        );
        let err = load_cases(&unknown, &reg, Split::Test).unwrap_err();
        assert!(err.to_string().contains("unknown statute"), "{err}");

        let empty = write_tmp(
            &dir,
            "e.jsonl",
            "{\"case_id\":\"c1\",\"sentences\":[],\"labels\":[]}\n",
        );
        assert!(matches!(
            load_cases(&empty, &reg, Split::Test),
            Err(CorpusError::EmptyCase { .. })
        ));
    }

    #[test]
    fn cases_preserve_sentence_order_and_stay_unmasked() {
        let dir = tempfile::tempdir().unwrap();
        let reg = load_statutes(&write_tmp(&dir, "s.jsonl", &statute_lines(3, "Section"))).unwrap();
        let path = write_tmp(
            &dir,
            "c.jsonl",
            "{\"provenance\":{\"seed\":1}}\n{\"case_id\":\"c1\",\"sentences\":[\"b 12\",\"a\"],\"labels\":[\"Section 2\",\"Section 0\"]}\n",
        );
        let cases = load_cases(&path, &reg, Split::Dev).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].sentences, vec!["b 12", "a"]);
        assert_eq!(cases[0].gold_labels, BTreeSet::from([0, 2]));
    }

    #[test]
    fn masking_examples() {
        assert_eq!(
            mask_numerics("offence under Sections 498A, 506B, 324 of IPC"),
            "offence under Sections ###A, ###B, ### of IPC"
        );
        assert_eq!(mask_numerics("no digits here"), "no digits here");
    }

    #[test]
    fn truncation() {
        let case = |n: usize| CaseDescription {
            case_id: "c".into(),
            sentences: (0..n).map(|i| format!("s{i}")).collect(),
            gold_labels: BTreeSet::from([1]),
            split: Split::Train,
        };
        assert_eq!(truncate_sentences(&case(57), 150), case(57));
        assert_eq!(truncate_sentences(&case(1), 150), case(1));
        let cut = truncate_sentences(&case(200), 150);
        assert_eq!(cut.sentences, case(150).sentences);
        assert_eq!(cut.gold_labels, BTreeSet::from([1]));
    }

    proptest::proptest! {
        #[test]
        fn mask_is_idempotent_and_length_preserving(s in "\\PC*") {
            let once = mask_numerics(&s);
            proptest::prop_assert_eq!(mask_numerics(&once), once.clone());
            proptest::prop_assert_eq!(once.chars().count(), s.chars().count());
            proptest::prop_assert!(!once.chars().any(|c| c.is_ascii_digit()));
        }
    }
}
