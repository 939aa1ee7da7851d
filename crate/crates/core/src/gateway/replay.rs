//! Cassette-backed record and replay.
//!
//! Completions are keyed by a SHA-256 over the canonical JSON of the whole
//! request (system, user and decode parameters), embeddings by model id and
//! text hash. In replay mode an unknown key is a hard error; in record mode
//! a miss is passed through to the wrapped backend and stored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatRequest, ChatResponse, EmbedBackend, EmbeddingVector, GatewayError, Result,
};

pub const CASSETTE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    /// Leading characters of the user message, for humans reading the file.
    pub request_summary: String,
    pub response: ChatResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteData {
    pub version: u32,
    #[serde(default)]
    pub chat_backend: String,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default)]
    pub embed_model: String,
    #[serde(default)]
    pub completions: BTreeMap<String, Recording>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl Default for CassetteData {
    fn default() -> Self {
        CassetteData {
            version: CASSETTE_VERSION,
            chat_backend: String::new(),
            supports_logprobs: false,
            embed_model: String::new(),
            completions: BTreeMap::new(),
            embeddings: BTreeMap::new(),
        }
    }
}

/// Shared, thread-safe cassette.
#[derive(Debug, Default)]
pub struct Cassette {
    data: Mutex<CassetteData>,
}

impl Cassette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_data(data: CassetteData) -> Self {
        Cassette {
            data: Mutex::new(data),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let data: CassetteData = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if data.version != CASSETTE_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported cassette version {}", data.version),
            ));
        }
        Ok(Self::from_data(data))
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn load_or_new(path: &Path) -> std::io::Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let data = self.data.lock().unwrap();
        let mut text = serde_json::to_string_pretty(&*data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        text.push('\n');
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)
    }

    pub fn snapshot(&self) -> CassetteData {
        self.data.lock().unwrap().clone()
    }

    pub fn completion_count(&self) -> usize {
        self.data.lock().unwrap().completions.len()
    }

    pub fn lookup(&self, req: &ChatRequest) -> Option<ChatResponse> {
        let key = request_key(req);
        self.data
            .lock()
            .unwrap()
            .completions
            .get(&key)
            .map(|r| r.response.clone())
    }

    pub fn insert(&self, req: &ChatRequest, response: ChatResponse) {
        let summary: String = req.user.chars().take(120).collect();
        self.data.lock().unwrap().completions.insert(
            request_key(req),
            Recording {
                request_summary: summary,
                response,
            },
        );
    }
}

/// Stable key over every field that affects a completion.
pub fn request_key(req: &ChatRequest) -> String {
    let canonical = serde_json::to_string(req).expect("requests always serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn embedding_key(model_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

pub struct ReplayChat {
    cassette: Arc<Cassette>,
    inner: Option<Arc<dyn ChatBackend>>,
}

impl ReplayChat {
    /// Strict replay: every request must already be on the cassette.
    pub fn replay(cassette: Arc<Cassette>) -> Self {
        ReplayChat {
            cassette,
            inner: None,
        }
    }

    /// Record mode: misses go to `inner` and are stored on the cassette.
    pub fn record(cassette: Arc<Cassette>, inner: Arc<dyn ChatBackend>) -> Self {
        {
            let mut data = cassette.data.lock().unwrap();
            data.chat_backend = inner.id();
            data.supports_logprobs = inner.supports_logprobs();
        }
        ReplayChat {
            cassette,
            inner: Some(inner),
        }
    }

    pub fn cassette(&self) -> &Arc<Cassette> {
        &self.cassette
    }
}

impl ChatBackend for ReplayChat {
    fn id(&self) -> String {
        let recorded = self.cassette.data.lock().unwrap().chat_backend.clone();
        match &self.inner {
            Some(inner) => format!("record({})", inner.id()),
            None => format!("replay({recorded})"),
        }
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        if let Some(hit) = self.cassette.lookup(req) {
            return Ok(hit);
        }
        match &self.inner {
            Some(inner) => {
                let response = inner.complete(req)?;
                self.cassette.insert(req, response.clone());
                Ok(response)
            }
            None => Err(GatewayError::MissingFixture(request_key(req))),
        }
    }

    fn supports_logprobs(&self) -> bool {
        match &self.inner {
            Some(inner) => inner.supports_logprobs(),
            None => self.cassette.data.lock().unwrap().supports_logprobs,
        }
    }
}

pub struct ReplayEmbedder {
    cassette: Arc<Cassette>,
    inner: Option<Arc<dyn EmbedBackend>>,
}

impl ReplayEmbedder {
    pub fn replay(cassette: Arc<Cassette>) -> Self {
        ReplayEmbedder {
            cassette,
            inner: None,
        }
    }

    pub fn record(cassette: Arc<Cassette>, inner: Arc<dyn EmbedBackend>) -> Self {
        cassette.data.lock().unwrap().embed_model = inner.model_id();
        ReplayEmbedder {
            cassette,
            inner: Some(inner),
        }
    }
}

impl EmbedBackend for ReplayEmbedder {
    fn model_id(&self) -> String {
        match &self.inner {
            Some(inner) => inner.model_id(),
            None => self.cassette.data.lock().unwrap().embed_model.clone(),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let model_id = self.model_id();
        let keys: Vec<String> = texts.iter().map(|t| embedding_key(&model_id, t)).collect();
        let mut found: Vec<Option<Vec<f64>>> = {
            let data = self.cassette.data.lock().unwrap();
            keys.iter().map(|k| data.embeddings.get(k).cloned()).collect()
        };
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| found[i].is_none()).collect();
        if !missing.is_empty() {
            let Some(inner) = &self.inner else {
                return Err(GatewayError::MissingFixture(keys[missing[0]].clone()));
            };
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = inner.embed(&batch)?;
            if fresh.len() != batch.len() {
                return Err(GatewayError::MalformedResponse(format!(
                    "{} embeddings for {} inputs",
                    fresh.len(),
                    batch.len()
                )));
            }
            let mut data = self.cassette.data.lock().unwrap();
            for (&i, v) in missing.iter().zip(fresh) {
                data.embeddings.insert(keys[i].clone(), v.values.clone());
                found[i] = Some(v.values);
            }
        }
        Ok(found
            .into_iter()
            .map(|v| EmbeddingVector {
                values: v.expect("filled above"),
                model_id: model_id.clone(),
            })
            .collect())
    }
}
