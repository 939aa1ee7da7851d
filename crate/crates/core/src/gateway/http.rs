//! Client for servers speaking the common chat-completions wire format
//! (`/chat/completions`, `/embeddings`, and optionally vLLM-style `/tokenize`).

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::stub::WhitespaceCounter;
use super::{
    ChatBackend, ChatRequest, ChatResponse, EmbedBackend, EmbeddingVector, GatewayError, Result,
    TokenCount, TokenCounter, TokenLogprob, Usage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL including the version prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub chat_model: String,
    #[serde(default)]
    pub embed_model: Option<String>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Whether the server returns `top_logprobs`.
    #[serde(default)]
    pub logprobs: bool,
    /// URL of a `/tokenize` endpoint accepting `{model, prompt}` and returning `{count}`.
    #[serde(default)]
    pub tokenize_url: Option<String>,
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Debug, Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlternative>,
}

#[derive(Debug, Deserialize)]
struct WireAlternative {
    token: String,
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug, Serialize)]
struct WireEmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct WireEmbedResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Debug, Deserialize)]
struct WireEmbedding {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

pub struct OpenAiCompatible {
    config: HttpConfig,
    client: Client,
}

impl OpenAiCompatible {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(OpenAiCompatible { config, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, url: &str, body: &impl Serialize) -> Result<Value> {
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            let message = serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.pointer("/error/message").and_then(|m| m.as_str()).map(String::from))
                .unwrap_or(text);
            let detail = format!("HTTP {}: {message}", status.as_u16());
            return Err(if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                GatewayError::Transport(detail)
            } else {
                GatewayError::BackendRefusal(detail)
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))
    }
}

impl ChatBackend for OpenAiCompatible {
    fn id(&self) -> String {
        format!("http:{}", self.config.chat_model)
    }

    fn supports_logprobs(&self) -> bool {
        self.config.logprobs
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let mut messages = Vec::with_capacity(2);
        if !req.system.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &req.system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &req.user,
        });
        let body = WireChatRequest {
            model: &self.config.chat_model,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            logprobs: req.logprob_top.map(|_| true),
            top_logprobs: req.logprob_top,
            stop: req.stop.as_deref(),
        };
        let value = self.post(&self.url("chat/completions"), &body)?;
        let wire: WireChatResponse = serde_json::from_value(value)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
        if let Some(refusal) = choice.message.refusal.filter(|r| !r.is_empty()) {
            return Err(GatewayError::BackendRefusal(refusal));
        }
        if choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(GatewayError::BackendRefusal("content filtered".into()));
        }
        let text = choice.message.content.unwrap_or_default();

        let steps = choice.logprobs.and_then(|l| l.content).unwrap_or_default();
        let tokens: Vec<TokenLogprob> = steps
            .iter()
            .map(|s| TokenLogprob::new(s.token.clone(), s.logprob))
            .collect();
        let top_alternatives = match req.logprob_top {
            None => None,
            Some(_) if steps.is_empty() && !text.is_empty() => {
                return Err(GatewayError::CapabilityMissing(
                    "server returned no logprobs".into(),
                ))
            }
            Some(top) => Some(
                steps
                    .into_iter()
                    .map(|s| {
                        let mut alts: Vec<TokenLogprob> = s
                            .top_logprobs
                            .into_iter()
                            .map(|a| TokenLogprob::new(a.token, a.logprob))
                            .collect();
                        alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
                        alts.truncate(top as usize);
                        alts
                    })
                    .collect(),
            ),
        };
        let usage = wire
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            text,
            tokens,
            top_alternatives,
            usage,
        })
    }
}

impl EmbedBackend for OpenAiCompatible {
    fn model_id(&self) -> String {
        self.config
            .embed_model
            .clone()
            .unwrap_or_else(|| self.config.chat_model.clone())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let model = self.model_id();
        let value = self.post(
            &self.url("embeddings"),
            &WireEmbedRequest {
                model: &model,
                input: texts,
            },
        )?;
        let mut wire: WireEmbedResponse = serde_json::from_value(value)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        wire.data.sort_by_key(|d| d.index);
        Ok(wire
            .data
            .into_iter()
            .map(|d| EmbeddingVector {
                values: d.embedding,
                model_id: model.clone(),
            })
            .collect())
    }
}

/// Token counts from the server's tokenizer, falling back to whitespace on failure.
pub struct ServerTokenizer {
    backend: OpenAiCompatible,
    url: String,
}

impl ServerTokenizer {
    pub fn new(config: HttpConfig) -> Result<Option<Self>> {
        let Some(url) = config.tokenize_url.clone() else {
            return Ok(None);
        };
        Ok(Some(ServerTokenizer {
            backend: OpenAiCompatible::new(config)?,
            url,
        }))
    }
}

impl TokenCounter for ServerTokenizer {
    fn label(&self) -> String {
        format!("server:{}", self.backend.config.chat_model)
    }

    fn count(&self, text: &str) -> TokenCount {
        let body = serde_json::json!({
            "model": self.backend.config.chat_model,
            "prompt": text,
        });
        let counted = self
            .backend
            .post(&self.url, &body)
            .ok()
            .and_then(|v| v.get("count").and_then(Value::as_u64));
        match counted {
            Some(count) => TokenCount {
                count: count as usize,
                approximate: false,
            },
            None => {
                tracing::warn!("tokenize endpoint unavailable, using whitespace count");
                WhitespaceCounter.count(text)
            }
        }
    }
}
