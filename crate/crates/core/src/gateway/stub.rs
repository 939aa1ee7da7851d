//! Deterministic offline backends.

use std::collections::VecDeque;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatRequest, ChatResponse, EmbedBackend, EmbeddingVector, GatewayError, Result,
    TokenCount, TokenCounter, Usage,
};

/// Returns queued texts in order and records every request it sees.
#[derive(Debug, Default)]
pub struct CannedChat {
    queue: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl CannedChat {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CannedChat {
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatBackend for CannedChat {
    fn id(&self) -> String {
        "canned".into()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        self.seen.lock().unwrap().push(req.clone());
        let text = self
            .queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| GatewayError::MissingFixture("canned responses exhausted".into()))?;
        Ok(ChatResponse {
            text,
            tokens: Vec::new(),
            top_alternatives: None,
            usage: Usage::default(),
        })
    }
}

/// Hashed bag-of-words embedder.
///
/// Each lowercase alphanumeric token is hashed into one of `dim` buckets with
/// a hash-derived sign, then the vector is L2-normalized. Identical texts get
/// identical vectors, and texts sharing words get positive similarity, which
/// is enough to exercise retrieval without a model.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut values = vec![0.0; self.dim];
        let mut any = false;
        for token in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let (bucket, sign) = self.slot(token.as_bytes());
            values[bucket] += sign;
            any = true;
        }
        if !any || values.iter().all(|v| *v == 0.0) {
            // Keep the norm positive for texts without usable tokens.
            let (bucket, _) = self.slot(format!("\u{0}{text}").as_bytes());
            values[bucket] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
        values
    }

    fn slot(&self, bytes: &[u8]) -> (usize, f64) {
        let digest = Sha256::digest(bytes);
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(word);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl EmbedBackend for HashEmbedder {
    fn model_id(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let model_id = self.model_id();
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector {
                values: self.vector(t),
                model_id: model_id.clone(),
            })
            .collect())
    }
}

/// Counts whitespace-separated tokens. Always flagged approximate.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn label(&self) -> String {
        "whitespace".into()
    }

    fn count(&self, text: &str) -> TokenCount {
        TokenCount {
            count: text.split_whitespace().count(),
            approximate: true,
        }
    }
}
