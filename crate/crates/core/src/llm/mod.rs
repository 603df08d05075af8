//! Zero-shot statute prompting gated by the classifier's top-K statutes.
//!
//! Cases are summarized extractively, each top-K statute is paired with the
//! summary in a prompt (standard or chain-of-thought), and the reply's
//! `Applicable:` line decides whether the statute is predicted.

mod client;
mod parse;
mod pipeline;

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use client::{ChatClient, HttpChatClient, RecordingClient, ReplayClient, ReplayEntry};
pub use parse::{parse_lenient, parse_response, render_response, ParseError};
pub use pipeline::{run_pipeline, CaseOutcome, ErroredPair, PipelineCase, PipelineOptions, PipelineOutput, VerdictRecord};

/// Sentences kept by [`summarize_case`] unless told otherwise.
pub const SUMMARY_SENTENCES: usize = 25;

const STANDARD_TEMPLATE: &str = include_str!("../../templates/standard_v1.txt");
const COT_TEMPLATE: &str = include_str!("../../templates/cot_v1.txt");
pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("LLM transport: {0}")]
    Transport(String),
    #[error("no recorded response for prompt {0}")]
    MissingFixture(String),
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("fixture {path}, line {line}: {message}")]
    Fixture { path: String, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Standard,
    Cot,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Standard => "standard",
            PromptMode::Cot => "cot",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            PromptMode::Standard => STANDARD_TEMPLATE,
            PromptMode::Cot => COT_TEMPLATE,
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(PromptMode::Standard),
            "cot" => Ok(PromptMode::Cot),
            other => Err(format!("unknown prompt mode {other:?} (expected standard or cot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    /// Strictly increasing indices into the case's sentences.
    pub indices: Vec<usize>,
    pub text: String,
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Keeps the `max_sentences` sentences closest in cosine to the centroid of
/// all sentence embeddings, in their original order. Equal scores prefer the
/// earlier sentence.
pub fn summarize_case(
    case_id: &str,
    sentences: &[String],
    embeddings: ArrayView2<'_, f64>,
    max_sentences: usize,
) -> CaseSummary {
    assert_eq!(sentences.len(), embeddings.nrows(), "one embedding per sentence");
    let indices: Vec<usize> = if sentences.len() <= max_sentences {
        (0..sentences.len()).collect()
    } else {
        let centroid = embeddings.mean_axis(Axis(0)).expect("non-empty case");
        let mut scored: Vec<(usize, f64)> = embeddings
            .outer_iter()
            .enumerate()
            .map(|(j, row)| (j, cosine(row, centroid.view())))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut keep: Vec<usize> = scored[..max_sentences].iter().map(|&(j, _)| j).collect();
        keep.sort_unstable();
        keep
    };
    let text = indices
        .iter()
        .map(|&j| sentences[j].as_str())
        .collect::<Vec<_>>()
        .join(" ");
    CaseSummary {
        case_id: case_id.to_string(),
        indices,
        text,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub statute: String,
    pub summary: String,
    pub text: String,
}

/// Fills the template for `mode`. Substitution is a single pass, so braces in
/// the statute or case text are left alone.
pub fn build_prompt(statute_content: &str, summary: &str, mode: PromptMode) -> PromptSpec {
    let template = mode.template();
    let (head, rest) = template.split_once("{statute}").expect("template has a statute slot");
    let (middle, tail) = rest.split_once("{case}").expect("template has a case slot");
    let text = [head, statute_content, middle, summary, tail].concat();
    PromptSpec {
        mode,
        statute: statute_content.to_string(),
        summary: summary.to_string(),
        text,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmVerdict {
    pub applicable: bool,
    pub explanation: String,
    /// Present in chain-of-thought mode when the reply has the section.
    pub common_aspects: Option<Vec<String>>,
    pub raw: String,
}

/// Settings for a chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub in_flight: usize,
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub backoff_ms: u64,
    /// Environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            temperature: 0.3,
            max_tokens: 200,
            in_flight: 4,
            retries: 3,
            backoff_ms: 500,
            api_key_env: None,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Config("max_tokens must be at least 1".into()));
        }
        if self.in_flight == 0 {
            return Err(LlmError::Config("in_flight must be at least 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(LlmError::Config("endpoint is empty".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a prompt, the replay fixture key.
pub fn prompt_key(prompt: &str) -> String {
    crate::embeddings::text_hash(prompt)
}
