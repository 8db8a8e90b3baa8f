//! Completion clients: the trait the generator consumes, an HTTP client
//! for a remote completion service, and a prompt-hash cache that makes
//! any client idempotent and rerunnable offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Text-completion service: prompt in, completion out.
pub trait LabelerClient {
    fn complete(&mut self, prompt: &str) -> Result<String>;
}

pub const ENDPOINT_VAR: &str = "LABELER_ENDPOINT";
pub const MODEL_VAR: &str = "LABELER_MODEL";
pub const TOKEN_VAR: &str = "LABELER_TOKEN";

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Blocking HTTP client for a completion endpoint. Sends
/// `{model, prompt, temperature: 0, max_tokens}` as JSON and expects
/// `{"text": ...}` back. Transient failures retry with exponential
/// backoff before surfacing an error.
pub struct RemoteLabeler {
    endpoint: String,
    model: String,
    token: Option<String>,
    max_tokens: usize,
    retries: u32,
    backoff: Duration,
    http: reqwest::blocking::Client,
}

impl RemoteLabeler {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        token: Option<String>,
    ) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Labeler(format!("building http client: {e}")))?;
        Ok(RemoteLabeler {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            max_tokens: 512,
            retries: 3,
            backoff: Duration::from_millis(100),
            http,
        })
    }

    /// Configure from `LABELER_ENDPOINT`, `LABELER_MODEL`, and the
    /// optional `LABELER_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| Error::Labeler(format!("{ENDPOINT_VAR} is not set")))?;
        let model = std::env::var(MODEL_VAR)
            .map_err(|_| Error::Labeler(format!("{MODEL_VAR} is not set")))?;
        RemoteLabeler::new(endpoint, model, std::env::var(TOKEN_VAR).ok())
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, prompt: &str) -> Result<String> {
        let body = CompletionRequest {
            model: &self.model,
            prompt,
            temperature: 0.0,
            max_tokens: self.max_tokens,
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Error::Labeler(format!("request failed: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::Labeler(format!("service returned {}", resp.status())));
        }
        let parsed: CompletionResponse = resp
            .json()
            .map_err(|e| Error::Labeler(format!("malformed service response: {e}")))?;
        Ok(parsed.text)
    }
}

impl LabelerClient for RemoteLabeler {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let mut delay = self.backoff;
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => last = Some(e),
            }
            if attempt < self.retries {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    prompt_hash: String,
    prompt: String,
    response: String,
    timestamp: u64,
}

/// Wraps any client with a prompt-hash cache, optionally persisted as
/// append-only JSONL. A cached prompt never reaches the inner client
/// again within the cache's lifetime.
pub struct CachingClient<C> {
    inner: C,
    entries: HashMap<String, String>,
    file: Option<File>,
    inner_calls: usize,
}

fn prompt_hash(prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    format!("{:x}", hasher.finalize())
}

impl<C: LabelerClient> CachingClient<C> {
    pub fn new(inner: C) -> Self {
        CachingClient { inner, entries: HashMap::new(), file: None, inner_calls: 0 }
    }

    /// Persistent cache: existing records are loaded, new ones appended.
    pub fn with_file(inner: C, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for (number, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| Error::DatasetParse {
                        path: path.to_path_buf(),
                        line: number + 1,
                        message: format!("bad cache record: {e}"),
                    })?;
                entries.insert(record.prompt_hash, record.response);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(CachingClient { inner, entries, file: Some(file), inner_calls: 0 })
    }

    /// How many prompts reached the wrapped client.
    pub fn inner_calls(&self) -> usize {
        self.inner_calls
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

impl<C: LabelerClient> LabelerClient for CachingClient<C> {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let hash = prompt_hash(prompt);
        if let Some(hit) = self.entries.get(&hash) {
            return Ok(hit.clone());
        }
        self.inner_calls += 1;
        let response = self.inner.complete(prompt)?;
        if let Some(file) = &mut self.file {
            let record = CacheRecord {
                prompt_hash: hash.clone(),
                prompt: prompt.to_string(),
                response: response.clone(),
                timestamp: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
        }
        self.entries.insert(hash, response.clone());
        Ok(response)
    }
}

/// A cache reader usable without any backing client; completing a prompt
/// absent from the cache is an error. Lets evaluation re-run offline
/// from a recorded session.
pub struct CacheOnlyClient {
    entries: HashMap<String, String>,
}

impl CacheOnlyClient {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        for (number, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheRecord =
                serde_json::from_str(&line).map_err(|e| Error::DatasetParse {
                    path: path.to_path_buf(),
                    line: number + 1,
                    message: format!("bad cache record: {e}"),
                })?;
            entries.insert(record.prompt_hash, record.response);
        }
        Ok(CacheOnlyClient { entries })
    }
}

impl LabelerClient for CacheOnlyClient {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        self.entries
            .get(&prompt_hash(prompt))
            .cloned()
            .ok_or_else(|| Error::Labeler("prompt not present in the cache".into()))
    }
}
