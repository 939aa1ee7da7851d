//! Per-session, per-speaker observation extraction.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{Observation, Session};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::jsonish;
use crate::prompts::{PromptError, PromptSet, EXTRACTION};

pub const OBSERVATIONS_KEY: &str = "OBSERVATIONS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("response is not JSON: {0}")]
    NotJson(String),
    #[error("response has no {0:?} key")]
    MissingKey(String),
    #[error("wrong shape: {0}")]
    WrongShape(String),
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("speaker {speaker:?} is not a participant of session {session}")]
    UnknownSpeaker { speaker: String, session: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{source} (raw response retained)")]
    Parse {
        source: ParseError,
        raw_response: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedObservations {
    pub texts: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub observations: Vec<Observation>,
    pub raw_response: String,
    pub parse_warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractConfig {
    pub max_tokens: u32,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { max_tokens: 1024 }
    }
}

pub fn render_extraction_prompt(
    prompts: &PromptSet,
    session: &Session,
    speaker_target: &str,
) -> Result<String, ExtractError> {
    if !session.has_participant(speaker_target) {
        return Err(ExtractError::UnknownSpeaker {
            speaker: speaker_target.to_string(),
            session: session.session_id.clone(),
        });
    }
    let transcript = session.transcript();
    Ok(prompts.get(EXTRACTION).render(&[
        ("speaker_a", &session.participants.0),
        ("speaker_b", &session.participants.1),
        ("speaker_target", speaker_target),
        ("time", session.timestamp.raw()),
        ("conversation", transcript.trim_end()),
    ])?)
}

/// Parses `{"OBSERVATIONS": [...]}` with an optional trailing `#END`.
pub fn parse_extraction(raw: &str) -> Result<ParsedObservations, ParseError> {
    let recovered = jsonish::parse_lenient(raw, '{', '}').map_err(ParseError::NotJson)?;
    let mut warnings = Vec::new();
    if !recovered.had_sentinel {
        warnings.push("missing #END sentinel".to_string());
    }
    if recovered.recovered {
        warnings.push("JSON object recovered from surrounding text".to_string());
    }
    let Value::Object(map) = recovered.value else {
        return Err(ParseError::WrongShape("top level is not an object".into()));
    };
    let value = map
        .get(OBSERVATIONS_KEY)
        .or_else(|| {
            map.iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(OBSERVATIONS_KEY))
                .map(|(_, v)| v)
        })
        .ok_or_else(|| ParseError::MissingKey(OBSERVATIONS_KEY.into()))?;
    let Value::Array(items) = value else {
        return Err(ParseError::WrongShape(format!(
            "{OBSERVATIONS_KEY} is not a list"
        )));
    };
    let mut texts = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let Value::String(s) = item else {
            return Err(ParseError::WrongShape(format!("item {i} is not a string")));
        };
        let s = s.trim();
        if s.is_empty() {
            warnings.push(format!("item {i} is blank and was skipped"));
        } else {
            texts.push(s.to_string());
        }
    }
    Ok(ParsedObservations { texts, warnings })
}

const META_STEMS: [&str; 4] = ["is supportive", "appreciates", "is encouraging", "is grateful"];

/// Flags observations about conversational dynamics rather than facts.
fn meta_observation_warning(subject: &str, text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    let rest = lower.strip_prefix(&subject.to_lowercase())?.trim_start();
    META_STEMS
        .iter()
        .find(|stem| rest.starts_with(*stem))
        .map(|stem| format!("possible meta-observation ({stem}): {text}"))
}

/// Renders the extraction prompt, calls the model and parses its observations.
pub fn extract(
    gateway: &Gateway,
    prompts: &PromptSet,
    session: &Session,
    speaker_target: &str,
    config: ExtractConfig,
) -> Result<ExtractionResult, ExtractError> {
    let prompt = render_extraction_prompt(prompts, session, speaker_target)?;
    let response = gateway.complete(&ChatRequest::greedy("", prompt, config.max_tokens))?;
    let parsed = parse_extraction(&response.text).map_err(|source| ExtractError::Parse {
        source,
        raw_response: response.text.clone(),
    })?;
    let mut warnings = parsed.warnings;
    let observations = parsed
        .texts
        .into_iter()
        .map(|text| {
            warnings.extend(meta_observation_warning(speaker_target, &text));
            Observation {
                subject: speaker_target.to_string(),
                text,
                source_session: session.session_id.clone(),
                extracted_at: session.timestamp.clone(),
            }
        })
        .collect();
    Ok(ExtractionResult {
        observations,
        raw_response: response.text,
        parse_warnings: warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_single_observation_with_sentinel() {
        let raw = r#"{"OBSERVATIONS": ["John initiated a community food drive due to the impact of unemployment on his neighbors."]} #END"#;
        let p = parse_extraction(raw).unwrap();
        assert_eq!(p.texts.len(), 1);
        assert!(p.texts[0].starts_with("John initiated a community food drive"));
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn empty_list_is_not_an_error() {
        let p = parse_extraction(r#"{"OBSERVATIONS": []} #END"#).unwrap();
        assert!(p.texts.is_empty());
    }

    #[test]
    fn wrong_key_and_shapes() {
        assert!(matches!(
            parse_extraction(r#"{"FACTS": ["x"]}"#),
            Err(ParseError::MissingKey(_))
        ));
        assert!(matches!(
            parse_extraction(r#"{"OBSERVATIONS": "x"}"#),
            Err(ParseError::WrongShape(_))
        ));
        assert!(matches!(
            parse_extraction(r#"{"OBSERVATIONS": [1, 2]}"#),
            Err(ParseError::WrongShape(_))
        ));
        assert!(matches!(
            parse_extraction("I could not find anything."),
            Err(ParseError::NotJson(_))
        ));
    }

    #[test]
    fn escaped_quotes_and_preamble_are_tolerated() {
        let raw = "Here are the observations:\n{\"OBSERVATIONS\": [\"John said \\\"hi\\\" to Maria.\"]}\n#END";
        let p = parse_extraction(raw).unwrap();
        assert_eq!(p.texts, vec!["John said \"hi\" to Maria."]);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn meta_observations_are_flagged_not_dropped() {
        assert!(meta_observation_warning("John", "John is supportive of Maria.").is_some());
        assert!(meta_observation_warning("John", "John appreciates the chat.").is_some());
        assert!(meta_observation_warning("John", "John adopted a dog in May 2023.").is_none());
    }
}
