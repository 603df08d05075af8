use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{prompt_key, LlmClientConfig, LlmError};

/// A chat-completion backend that answers one user prompt at a time.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;

    /// Requests the caller may keep in flight at once.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Client for an OpenAI-style chat-completions endpoint, with retries and
/// exponential backoff on transport errors, 429 and 5xx.
pub struct HttpChatClient {
    config: LlmClientConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl HttpChatClient {
    pub fn new(config: LlmClientConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| LlmError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }

    fn attempt(&self, prompt: &str) -> Result<String, (bool, String)> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let retryable = status == 429 || status >= 500;
            return Err((retryable, format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| (false, e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or((false, "response has no choices".to_string()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut delay = self.config.backoff_ms;
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err((retryable, message)) => {
                    if !retryable || attempt >= self.config.retries {
                        return Err(LlmError::Transport(format!("{}: {message}", self.config.endpoint)));
                    }
                    log::warn!("LLM request failed ({message}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.in_flight
    }
}

/// One line of a replay fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_sha: String,
    pub response: String,
}

/// Answers from recorded responses keyed by the prompt's SHA-256.
#[derive(Debug, Default, Clone)]
pub struct ReplayClient {
    responses: BTreeMap<String, String>,
}

impl ReplayClient {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            responses: entries.into_iter().map(|e| (e.prompt_sha, e.response)).collect(),
        }
    }

    /// Records a response for `prompt`.
    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses.insert(prompt_key(prompt), response.into());
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line).map_err(|e| LlmError::Fixture {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn entries(&self) -> impl Iterator<Item = ReplayEntry> + '_ {
        self.responses.iter().map(|(k, v)| ReplayEntry {
            prompt_sha: k.clone(),
            response: v.clone(),
        })
    }

    /// Writes the fixture sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in self.entries() {
            serde_json::to_writer(&mut w, &e).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let key = prompt_key(prompt);
        self.responses.get(&key).cloned().ok_or(LlmError::MissingFixture(key))
    }

    fn max_in_flight(&self) -> usize {
        4
    }
}

/// Passes prompts to an inner client and remembers every successful reply so
/// the run can be replayed later.
pub struct RecordingClient<C> {
    inner: C,
    recorded: Mutex<ReplayClient>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            recorded: Mutex::new(ReplayClient::default()),
        }
    }

    pub fn into_fixture(self) -> ReplayClient {
        self.recorded.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let reply = self.inner.complete(prompt)?;
        self.recorded
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(prompt, reply.clone());
        Ok(reply)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}
