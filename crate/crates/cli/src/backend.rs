use std::path::PathBuf;
use std::sync::Arc;

use evomem_core::gateway::http::{HttpConfig, OpenAiCompatible, ServerTokenizer};
use evomem_core::gateway::replay::{Cassette, ReplayChat, ReplayEmbedder};
use evomem_core::gateway::scripted::ScriptedChat;
use evomem_core::gateway::stub::{HashEmbedder, WhitespaceCounter};
use evomem_core::gateway::{
    ChatBackend, EmbedBackend, Gateway, RetryPolicy, TokenCounter,
};
use tracing::{info, warn};

use crate::config::{BackendConfig, BackendKind, CassetteMode, API_KEY_ENV};
use crate::error::{io_err, CliError, CliResult};
use crate::workspace::{BackendIds, CallCounts};

pub struct Backend {
    pub gateway: Gateway,
    recording: Option<(Arc<Cassette>, PathBuf)>,
}

fn http_config(cfg: &BackendConfig) -> HttpConfig {
    HttpConfig {
        base_url: cfg.base_url.clone(),
        chat_model: cfg.chat_model.clone(),
        embed_model: cfg.embed_model.clone(),
        api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        timeout_secs: cfg.timeout_secs,
        logprobs: cfg.logprobs,
        tokenize_url: cfg.tokenize_url.clone(),
    }
}

impl Backend {
    pub fn build(cfg: &BackendConfig) -> CliResult<Backend> {
        let counter: Arc<dyn TokenCounter> = match (cfg.kind, &cfg.tokenize_url) {
            (BackendKind::Http, Some(_)) => match ServerTokenizer::new(http_config(cfg))? {
                Some(t) => Arc::new(t),
                None => Arc::new(WhitespaceCounter),
            },
            _ => Arc::new(WhitespaceCounter),
        };
        let live = || -> CliResult<(Arc<dyn ChatBackend>, Arc<dyn EmbedBackend>)> {
            let fallback_embedder = || Arc::new(HashEmbedder::new(cfg.embed_dim));
            Ok(match cfg.kind {
                BackendKind::Scripted => (Arc::new(ScriptedChat), fallback_embedder()),
                BackendKind::Http => {
                    let client = Arc::new(OpenAiCompatible::new(http_config(cfg))?);
                    let embedder: Arc<dyn EmbedBackend> = if cfg.embed_model.is_some() {
                        client.clone()
                    } else {
                        warn!("no backend.embed_model; using the offline hashing embedder");
                        fallback_embedder()
                    };
                    (client, embedder)
                }
            })
        };

        let mut recording = None;
        let (chat, embedder): (Arc<dyn ChatBackend>, Arc<dyn EmbedBackend>) = match cfg.mode {
            CassetteMode::Live => live()?,
            CassetteMode::Record => {
                let path = cfg.cassette.clone().expect("validated");
                let cassette =
                    Arc::new(Cassette::load_or_new(&path).map_err(|e| io_err(path.display(), e))?);
                let (chat, embedder) = live()?;
                recording = Some((cassette.clone(), path));
                (
                    Arc::new(ReplayChat::record(cassette.clone(), chat)),
                    Arc::new(ReplayEmbedder::record(cassette, embedder)),
                )
            }
            CassetteMode::Replay => {
                let path = cfg.cassette.clone().expect("validated");
                let cassette = Arc::new(Cassette::load(&path).map_err(|e| {
                    CliError::Config(format!("cassette {}: {e}", path.display()))
                })?);
                (
                    Arc::new(ReplayChat::replay(cassette.clone())),
                    Arc::new(ReplayEmbedder::replay(cassette)),
                )
            }
        };
        let gateway = Gateway::new(chat, embedder, counter)
            .with_retry(RetryPolicy {
                attempts: cfg.retry_attempts.max(1),
                ..RetryPolicy::default()
            })
            .with_max_inflight(cfg.max_inflight);
        Ok(Backend { gateway, recording })
    }

    pub fn ids(&self) -> BackendIds {
        BackendIds {
            chat: self.gateway.chat_id(),
            embed: self.gateway.embed_model_id(),
            tokenizer: self.gateway.tokenizer_label(),
            logprobs: self.gateway.supports_logprobs(),
        }
    }

    pub fn calls(&self) -> CallCounts {
        let s = self.gateway.stats();
        CallCounts {
            completions: s.complete_calls,
            embed_calls: s.embed_calls,
            embedded_texts: s.embedded_texts,
        }
    }

    /// Persists the cassette in record mode.
    pub fn finish(&self) -> CliResult<()> {
        if let Some((cassette, path)) = &self.recording {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent.display(), e))?;
            }
            cassette.save(path).map_err(|e| io_err(path.display(), e))?;
            info!(path = %path.display(), completions = cassette.completion_count(), "cassette saved");
        }
        Ok(())
    }
}
