//! Uniform access to chat completion, embeddings and token counting.
//!
//! A [`Gateway`] combines a chat backend, an embedding backend and a token
//! counter behind one handle that adds request validation, retries on
//! transport failures, an in-flight request bound and call instrumentation.
//!
//! Backends:
//! - [`http::OpenAiCompatible`]: any server speaking the common
//!   chat-completions / embeddings wire format.
//! - [`replay::ReplayChat`] / [`replay::ReplayEmbedder`]: cassette-backed
//!   record and replay for offline, byte-reproducible runs.
//! - [`stub::HashEmbedder`] / [`stub::WhitespaceCounter`]: deterministic,
//!   dependency-free fallbacks.

pub mod http;
pub mod replay;
pub mod scripted;
pub mod stub;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub const MAX_LOGPROB_TOP: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused the request: {0}")]
    BackendRefusal(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch for {model}: expected {expected}, got {got}")]
    DimensionMismatch {
        model: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no recorded fixture for request key {0}")]
    MissingFixture(String),
    #[error("backend capability missing: {0}")]
    CapabilityMissing(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub max_tokens: u32,
    /// 0 means greedy decoding.
    pub temperature: f64,
    /// Number of top alternatives to report per generated token.
    pub logprob_top: Option<u32>,
    pub stop: Option<Vec<String>>,
}

impl ChatRequest {
    /// Greedy request, the default everywhere in the pipeline.
    pub fn greedy(system: impl Into<String>, user: impl Into<String>, max_tokens: u32) -> Self {
        ChatRequest {
            system: system.into(),
            user: user.into(),
            max_tokens,
            temperature: 0.0,
            logprob_top: None,
            stop: None,
        }
    }

    pub fn with_logprobs(mut self, top: u32) -> Self {
        self.logprob_top = Some(top);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if let Some(top) = self.logprob_top {
            if !(1..=MAX_LOGPROB_TOP).contains(&top) {
                return Err(GatewayError::InvalidRequest(format!(
                    "logprob_top must be in [1, {MAX_LOGPROB_TOP}], got {top}"
                )));
            }
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        TokenLogprob {
            token: token.into(),
            logprob,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
    /// Per generated token, the top alternatives sorted by descending logprob.
    pub top_alternatives: Option<Vec<Vec<TokenLogprob>>>,
    pub usage: Usage,
}

impl ChatResponse {
    /// Checks the alternative lists: one per token, descending, at most `top` long.
    pub fn check_alternatives(&self, top: u32) -> Result<()> {
        let Some(steps) = &self.top_alternatives else {
            return Ok(());
        };
        if steps.len() != self.tokens.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "{} alternative lists for {} tokens",
                steps.len(),
                self.tokens.len()
            )));
        }
        for (i, step) in steps.iter().enumerate() {
            if step.is_empty() || step.len() > top as usize {
                return Err(GatewayError::MalformedResponse(format!(
                    "step {i} has {} alternatives, expected 1..={top}",
                    step.len()
                )));
            }
            if step.windows(2).any(|w| w[0].logprob < w[1].logprob) {
                return Err(GatewayError::MalformedResponse(format!(
                    "step {i} alternatives are not sorted by descending logprob"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; 0 when either side has zero norm.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub count: usize,
    /// True when produced by the whitespace fallback instead of a model tokenizer.
    pub approximate: bool,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse>;
    fn supports_logprobs(&self) -> bool {
        false
    }
}

pub trait EmbedBackend: Send + Sync {
    fn model_id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

pub trait TokenCounter: Send + Sync {
    fn label(&self) -> String;
    fn count(&self, text: &str) -> TokenCount;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn run<T>(&self, what: &str, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.attempts => {
                    warn!(%e, attempt, "{what} failed, retrying");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InflightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

impl InflightLimiter {
    fn new(max: usize) -> Self {
        InflightLimiter {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut current = self.current.lock().unwrap();
        while *current >= self.max {
            current = self.freed.wait(current).unwrap();
        }
        *current += 1;
        self.peak.fetch_max(*current, Ordering::SeqCst);
        Permit { limiter: self }
    }
}

struct Permit<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut current = self.limiter.current.lock().unwrap();
        *current -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Call counters, readable while the gateway is in use.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub complete_calls: AtomicU64,
    pub embed_calls: AtomicU64,
    pub embedded_texts: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub complete_calls: u64,
    pub embed_calls: u64,
    pub embedded_texts: u64,
    pub peak_inflight: usize,
}

#[derive(Clone)]
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbedBackend>,
    counter: Arc<dyn TokenCounter>,
    retry: RetryPolicy,
    limiter: Arc<InflightLimiter>,
    stats: Arc<GatewayStats>,
    dims: Arc<Mutex<HashMap<String, usize>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("chat", &self.chat.id())
            .field("embedder", &self.embedder.model_id())
            .field("counter", &self.counter.label())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        embedder: Arc<dyn EmbedBackend>,
        counter: Arc<dyn TokenCounter>,
    ) -> Self {
        Gateway {
            chat,
            embedder,
            counter,
            retry: RetryPolicy::default(),
            limiter: Arc::new(InflightLimiter::new(4)),
            stats: Arc::new(GatewayStats::default()),
            dims: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_inflight(mut self, max: usize) -> Self {
        self.limiter = Arc::new(InflightLimiter::new(max));
        self
    }

    pub fn chat_id(&self) -> String {
        self.chat.id()
    }

    pub fn embed_model_id(&self) -> String {
        self.embedder.model_id()
    }

    pub fn tokenizer_label(&self) -> String {
        self.counter.label()
    }

    pub fn supports_logprobs(&self) -> bool {
        self.chat.supports_logprobs()
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            complete_calls: self.stats.complete_calls.load(Ordering::SeqCst),
            embed_calls: self.stats.embed_calls.load(Ordering::SeqCst),
            embedded_texts: self.stats.embedded_texts.load(Ordering::SeqCst),
            peak_inflight: self.limiter.peak.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let resp = self.retry.run("completion", || {
            let _permit = self.limiter.acquire();
            self.stats.complete_calls.fetch_add(1, Ordering::SeqCst);
            self.chat.complete(req)
        })?;
        if let Some(top) = req.logprob_top {
            resp.check_alternatives(top)?;
        }
        Ok(resp)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "embed needs at least one text".into(),
            ));
        }
        let vectors = self.retry.run("embedding", || {
            let _permit = self.limiter.acquire();
            self.stats.embed_calls.fetch_add(1, Ordering::SeqCst);
            self.embedder.embed(texts)
        })?;
        self.stats
            .embedded_texts
            .fetch_add(texts.len() as u64, Ordering::SeqCst);
        if vectors.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "{} embeddings for {} inputs",
                vectors.len(),
                texts.len()
            )));
        }
        let mut dims = self.dims.lock().unwrap();
        for v in &vectors {
            let expected = *dims.entry(v.model_id.clone()).or_insert(v.dim());
            if v.dim() != expected {
                return Err(GatewayError::DimensionMismatch {
                    model: v.model_id.clone(),
                    expected,
                    got: v.dim(),
                });
            }
        }
        Ok(vectors)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }

    pub fn count_tokens(&self, text: &str) -> TokenCount {
        self.counter.count(text)
    }
}

#[cfg(test)]
mod tests {
    use super::stub::{HashEmbedder, WhitespaceCounter};
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        failures_left: AtomicU32,
        error: GatewayError,
        calls: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, _req: &ChatRequest) -> Result<ChatResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures_left.load(Ordering::SeqCst) > 0 {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
                return Err(self.error.clone());
            }
            Ok(ChatResponse {
                text: "ok".into(),
                tokens: vec![TokenLogprob::new("ok", 0.0)],
                top_alternatives: None,
                usage: Usage::default(),
            })
        }
    }

    fn gateway(chat: Arc<dyn ChatBackend>) -> Gateway {
        Gateway::new(
            chat,
            Arc::new(HashEmbedder::new(32)),
            Arc::new(WhitespaceCounter),
        )
        .with_retry(RetryPolicy::immediate(3))
    }

    fn flaky(failures: u32, error: GatewayError) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures_left: AtomicU32::new(failures),
            error,
            calls: AtomicU32::new(0),
        })
    }

    #[test]
    fn transport_errors_are_retried_up_to_three_attempts() {
        let backend = flaky(2, GatewayError::Transport("reset".into()));
        let gw = gateway(backend.clone());
        assert_eq!(gw.complete(&ChatRequest::greedy("", "q", 8)).unwrap().text, "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);

        let backend = flaky(3, GatewayError::Transport("reset".into()));
        let gw = gateway(backend.clone());
        assert!(matches!(
            gw.complete(&ChatRequest::greedy("", "q", 8)),
            Err(GatewayError::Transport(_))
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn refusals_surface_immediately() {
        let backend = flaky(1, GatewayError::BackendRefusal("policy".into()));
        let gw = gateway(backend.clone());
        assert!(matches!(
            gw.complete(&ChatRequest::greedy("", "q", 8)),
            Err(GatewayError::BackendRefusal(_))
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn request_validation() {
        let gw = gateway(flaky(0, GatewayError::Transport(String::new())));
        let mut req = ChatRequest::greedy("", "q", 8);
        req.temperature = -0.1;
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        let req = ChatRequest::greedy("", "q", 8).with_logprobs(65);
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        let req = ChatRequest::greedy("", "q", 8).with_logprobs(0);
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn embed_rejects_empty_input_and_counts_calls() {
        let gw = gateway(flaky(0, GatewayError::Transport(String::new())));
        assert!(gw.embed(&[]).is_err());
        let v = gw.embed(&["a".into(), "a".into()]).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0], v[1]);
        let s = gw.stats();
        assert_eq!((s.embed_calls, s.embedded_texts), (1, 2));
    }

    struct Slow {
        inflight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Slow {
        fn id(&self) -> String {
            "slow".into()
        }
        fn complete(&self, _req: &ChatRequest) -> Result<ChatResponse> {
            let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.inflight.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                text: String::new(),
                tokens: vec![],
                top_alternatives: None,
                usage: Usage::default(),
            })
        }
    }

    #[test]
    fn inflight_bound_is_never_exceeded() {
        let backend = Arc::new(Slow {
            inflight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = gateway(backend.clone()).with_max_inflight(3);
        std::thread::scope(|s| {
            for _ in 0..16 {
                let gw = gw.clone();
                s.spawn(move || {
                    for _ in 0..4 {
                        gw.complete(&ChatRequest::greedy("", "q", 4)).unwrap();
                    }
                });
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
        assert!(gw.stats().peak_inflight <= 3);
        assert_eq!(gw.stats().complete_calls, 64);
    }

    #[test]
    fn alternatives_shape_is_checked() {
        let mut resp = ChatResponse {
            text: "a b".into(),
            tokens: vec![TokenLogprob::new("a", -0.1), TokenLogprob::new(" b", -0.2)],
            top_alternatives: Some(vec![
                vec![TokenLogprob::new("a", -0.1), TokenLogprob::new("c", -2.0)],
                vec![TokenLogprob::new(" b", -0.2), TokenLogprob::new("d", -3.0)],
            ]),
            usage: Usage::default(),
        };
        assert!(resp.check_alternatives(2).is_ok());
        assert!(resp.check_alternatives(1).is_err());
        resp.top_alternatives.as_mut().unwrap()[1].reverse();
        assert!(resp.check_alternatives(2).is_err());
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }
}
