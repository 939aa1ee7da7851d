//! The inference path: ground a question on retrieved memories and ask the model.

use serde::{Deserialize, Serialize};

use crate::eval::Answered;
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{PromptError, PromptSet, ANSWER_CONCISE, ANSWER_SYSTEM, ANSWER_USER};

pub const NO_MEMORIES: &str = "(none)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerConfig {
    pub concise: bool,
    pub max_tokens: u32,
}

impl Default for AnswerConfig {
    fn default() -> Self {
        AnswerConfig {
            concise: false,
            max_tokens: 128,
        }
    }
}

pub fn render_memories(memories: &[String]) -> String {
    if memories.is_empty() {
        return NO_MEMORIES.to_string();
    }
    memories
        .iter()
        .enumerate()
        .map(|(i, m)| format!("{}. {}", i + 1, m.trim_end()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn answer_request(
    prompts: &PromptSet,
    memories: &[String],
    question: &str,
    cfg: AnswerConfig,
) -> Result<ChatRequest, PromptError> {
    let mut system = prompts.get(ANSWER_SYSTEM).text.clone();
    if cfg.concise {
        system.push_str("\n\n");
        system.push_str(&prompts.get(ANSWER_CONCISE).text);
    }
    let user = prompts.get(ANSWER_USER).render(&[
        ("memories", &render_memories(memories)),
        ("question", question),
    ])?;
    Ok(ChatRequest::greedy(system, user, cfg.max_tokens))
}

/// Prompt size as seen by the configured token counter.
pub fn input_tokens(gateway: &Gateway, req: &ChatRequest) -> usize {
    let system = gateway.count_tokens(&req.system).count;
    system + gateway.count_tokens(&req.user).count
}

#[derive(Debug, thiserror::Error)]
pub enum AnswerError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn answer(
    gateway: &Gateway,
    prompts: &PromptSet,
    memories: &[String],
    question: &str,
    cfg: AnswerConfig,
) -> Result<Answered, AnswerError> {
    let req = answer_request(prompts, memories, question, cfg)?;
    let tokens = input_tokens(gateway, &req);
    let resp = gateway.complete(&req)?;
    Ok(Answered {
        text: resp.text.trim().to_string(),
        input_tokens: tokens,
    })
}
