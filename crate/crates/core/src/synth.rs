//! Self-supervised QA synthesis and the four-stage filter that produces the training set.

use once_cell::sync::Lazy;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{FilterStatus, QAPair, Session};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::jsonish;
use crate::prompts::{PromptError, PromptSet, QA_GENERATION, TEACHER_SYSTEM, TEACHER_USER};

pub const DEFAULT_PAIRS_PER_SESSION: usize = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("speaker {0:?} is not a participant")]
    UnknownSpeaker(String),
    #[error("unparseable QA list: {reason}")]
    Parse { reason: String, raw_response: String },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub sim_threshold: f64,
    pub max_answer_tokens: usize,
    pub unanswerable_phrases: Vec<String>,
    /// Drop "when did X say/send ..." questions about message timing.
    pub temporal_heuristic: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            sim_threshold: 0.5,
            max_answer_tokens: 30,
            unanswerable_phrases: vec![
                "i do not know".into(),
                "not mentioned".into(),
                "unspecified".into(),
            ],
            temporal_heuristic: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sim_threshold > 0.0 && self.sim_threshold < 1.0) {
            return Err(SynthError::InvalidConfig(format!(
                "sim_threshold must be in (0, 1), got {}",
                self.sim_threshold
            )));
        }
        if self.max_answer_tokens == 0 {
            return Err(SynthError::InvalidConfig(
                "max_answer_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A filter outcome. `rule` names the check that fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: FilterStatus,
    pub rule: &'static str,
}

impl Verdict {
    const KEPT: Verdict = Verdict {
        status: FilterStatus::Kept,
        rule: "kept",
    };

    fn drop(status: FilterStatus, rule: &'static str) -> Verdict {
        Verdict { status, rule }
    }

    pub fn kept(&self) -> bool {
        self.status == FilterStatus::Kept
    }
}

/// Lowercase, punctuation removed, whitespace collapsed.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn filter_trivial(pair: &QAPair) -> Verdict {
    let answer = normalize_text(&pair.answer);
    if !answer.is_empty() && normalize_text(&pair.question).contains(&answer) {
        Verdict::drop(FilterStatus::DroppedTrivial, "answer_in_question")
    } else {
        Verdict::KEPT
    }
}

static MESSAGE_TIMING: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^when\b.*\b(say|said|send|sent|share|shared|message|messaged|chat|chatted|text|texted|mention|mentioned|tell|told)\b").unwrap()
});

pub fn filter_unanswerable(pair: &QAPair, cfg: &FilterConfig) -> Verdict {
    let answer = normalize_text(&pair.answer);
    if cfg
        .unanswerable_phrases
        .iter()
        .any(|p| answer.contains(&normalize_text(p)))
    {
        return Verdict::drop(FilterStatus::DroppedUnanswerable, "unanswerable_phrase");
    }
    if cfg.temporal_heuristic && MESSAGE_TIMING.is_match(&normalize_text(&pair.question)) {
        return Verdict::drop(
            FilterStatus::DroppedUnanswerable,
            "message_timing_question (heuristic)",
        );
    }
    Verdict::KEPT
}

pub fn filter_length(answer_tokens: usize, cfg: &FilterConfig) -> Verdict {
    if answer_tokens > cfg.max_answer_tokens {
        Verdict::drop(FilterStatus::DroppedTooLong, "answer_too_long")
    } else {
        Verdict::KEPT
    }
}

pub fn filter_cycle_consistency(similarity: f64, cfg: &FilterConfig) -> Verdict {
    if similarity < cfg.sim_threshold {
        Verdict::drop(FilterStatus::DroppedInconsistent, "teacher_disagrees")
    } else {
        Verdict::KEPT
    }
}

/// A dropped pair and the rule that dropped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub pair: QAPair,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub kept: Vec<QAPair>,
    pub audit: Vec<AuditEntry>,
}

/// Runs the filters in order: trivial, unanswerable, length, cycle consistency.
///
/// `teacher` and `similarity` are only called for pairs that pass the first three.
pub fn run_filters<E, C, T, S>(
    pairs: Vec<QAPair>,
    cfg: &FilterConfig,
    count_tokens: C,
    teacher: T,
    similarity: S,
) -> Result<Dataset, E>
where
    C: Fn(&str) -> usize + Sync,
    T: Fn(&QAPair) -> Result<String, E> + Sync,
    S: Fn(&str, &str) -> Result<f64, E> + Sync,
    E: Send,
{
    let judged: Vec<(QAPair, Verdict)> = pairs
        .into_par_iter()
        .map(|mut pair| {
            let cheap = [
                filter_trivial(&pair),
                filter_unanswerable(&pair, cfg),
                filter_length(count_tokens(&pair.answer), cfg),
            ];
            if let Some(v) = cheap.into_iter().find(|v| !v.kept()) {
                return Ok((pair, v));
            }
            let teacher_answer = teacher(&pair)?;
            let sim = similarity(&pair.answer, &teacher_answer)?.clamp(0.0, 1.0);
            pair.teacher_answer = Some(teacher_answer);
            pair.similarity = Some(sim);
            Ok((pair, filter_cycle_consistency(sim, cfg)))
        })
        .collect::<Result<_, E>>()?;

    let mut out = Dataset::default();
    for (mut pair, verdict) in judged {
        pair.filter_status = verdict.status;
        if verdict.kept() {
            out.kept.push(pair);
        } else {
            out.audit.push(AuditEntry {
                pair,
                rule: verdict.rule.to_string(),
            });
        }
    }
    Ok(out)
}

/// Parses `[{"question": ..., "answer": ...}, ...]`, skipping incomplete items.
pub fn parse_qa_list(raw: &str, source_session: &str) -> Result<Vec<QAPair>, String> {
    let recovered = jsonish::parse_lenient(raw, '[', ']')?;
    let Value::Array(items) = recovered.value else {
        return Err("expected a JSON list".into());
    };
    Ok(items
        .iter()
        .filter_map(|item| {
            let q = item.get("question")?.as_str()?.trim();
            let a = item.get("answer")?.as_str()?.trim();
            (!q.is_empty() && !a.is_empty()).then(|| QAPair::new(q, a, source_session))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub pairs_per_session: usize,
    pub generation_max_tokens: u32,
    pub teacher_max_tokens: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pairs_per_session: DEFAULT_PAIRS_PER_SESSION,
            generation_max_tokens: 1024,
            teacher_max_tokens: 64,
        }
    }
}

pub fn generate_qa(
    gateway: &Gateway,
    prompts: &PromptSet,
    session: &Session,
    speaker: &str,
    n_per_session: usize,
    max_tokens: u32,
) -> Result<Vec<QAPair>, SynthError> {
    if n_per_session == 0 {
        return Ok(Vec::new());
    }
    if !session.has_participant(speaker) {
        return Err(SynthError::UnknownSpeaker(speaker.to_string()));
    }
    let transcript = session.transcript();
    let prompt = prompts.get(QA_GENERATION).render(&[
        ("speaker_a", &session.participants.0),
        ("speaker_b", &session.participants.1),
        ("time", session.timestamp.raw()),
        ("conversation", transcript.trim_end()),
        ("count", &n_per_session.to_string()),
        ("speaker_target", speaker),
    ])?;
    let response = gateway.complete(&ChatRequest::greedy("", prompt, max_tokens))?;
    let mut pairs =
        parse_qa_list(&response.text, &session.session_id).map_err(|reason| SynthError::Parse {
            reason,
            raw_response: response.text.clone(),
        })?;
    pairs.truncate(n_per_session);
    Ok(pairs)
}

/// The teacher request: full history plus question, greedy.
pub fn teacher_request(
    prompts: &PromptSet,
    context: &str,
    question: &str,
    max_tokens: u32,
) -> Result<ChatRequest, PromptError> {
    let user = prompts
        .get(TEACHER_USER)
        .render(&[("context", context), ("question", question)])?;
    Ok(ChatRequest::greedy(
        prompts.get(TEACHER_SYSTEM).text.clone(),
        user,
        max_tokens,
    ))
}

pub fn teacher_answer(
    gateway: &Gateway,
    prompts: &PromptSet,
    context: &str,
    question: &str,
    max_tokens: u32,
) -> Result<String, SynthError> {
    let req = teacher_request(prompts, context, question, max_tokens)?;
    Ok(gateway.complete(&req)?.text.trim().to_string())
}

/// Generates pairs for every session, then filters them against the teacher.
///
/// `context` is the full conversation history the teacher sees.
pub fn build_dataset(
    gateway: &Gateway,
    prompts: &PromptSet,
    sessions: &[Session],
    speaker: &str,
    context: &str,
    filter: &FilterConfig,
    cfg: SynthConfig,
) -> Result<Dataset, SynthError> {
    filter.validate()?;
    let generated: Vec<Vec<QAPair>> = sessions
        .par_iter()
        .map(|s| {
            generate_qa(
                gateway,
                prompts,
                s,
                speaker,
                cfg.pairs_per_session,
                cfg.generation_max_tokens,
            )
        })
        .collect::<Result<_, _>>()?;
    run_filters(
        generated.into_iter().flatten().collect(),
        filter,
        |text| gateway.count_tokens(text).count,
        |pair| teacher_answer(gateway, prompts, context, &pair.question, cfg.teacher_max_tokens),
        |a, b| {
            let v = gateway.embed(&[a.to_string(), b.to_string()])?;
            Ok(v[0].cosine(&v[1]))
        },
    )
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::sync::Arc;

    use super::*;
    use crate::domain::{validate_session, RawSession, Turn};
    use crate::gateway::stub::{CannedChat, HashEmbedder, WhitespaceCounter};

    fn pair(q: &str, a: &str) -> QAPair {
        QAPair::new(q, a, "s1")
    }

    fn ws(text: &str) -> usize {
        text.split_whitespace().count()
    }

    #[test]
    fn trivial_examples() {
        assert_eq!(filter_trivial(&pair("Did John buy a car?", "a car")).status, FilterStatus::DroppedTrivial);
        assert!(filter_trivial(&pair("What did John buy?", "a car")).kept());
        assert!(filter_trivial(&pair("", "x")).kept());
    }

    #[test]
    fn unanswerable_examples() {
        let cfg = FilterConfig::default();
        let status = |a: &str| filter_unanswerable(&pair("What did John buy?", a), &cfg).status;
        assert_eq!(status("I do not know."), FilterStatus::DroppedUnanswerable);
        assert_eq!(status("Not mentioned in the chat"), FilterStatus::DroppedUnanswerable);
        assert_eq!(status("5 August, 2023"), FilterStatus::Kept);
        let v = filter_unanswerable(&pair("When did Maria send the photo?", "5 May, 2023"), &cfg);
        assert_eq!(v.status, FilterStatus::DroppedUnanswerable);
        assert!(v.rule.contains("heuristic"));
        assert!(filter_unanswerable(&pair("When did Maria adopt the dog?", "5 May, 2023"), &cfg).kept());
    }

    #[test]
    fn length_and_similarity_boundaries() {
        let cfg = FilterConfig::default();
        assert_eq!(filter_length(31, &cfg).status, FilterStatus::DroppedTooLong);
        assert!(filter_length(30, &cfg).kept());
        assert!(filter_length(1, &cfg).kept());
        assert!(filter_cycle_consistency(0.5, &cfg).kept());
        assert!(filter_cycle_consistency(1.0, &cfg).kept());
        assert_eq!(filter_cycle_consistency(0.0, &cfg).status, FilterStatus::DroppedInconsistent);
        assert_eq!(filter_cycle_consistency(0.4999999, &cfg).status, FilterStatus::DroppedInconsistent);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        for bad in [0.0, 1.0, -0.1] {
            let cfg = FilterConfig { sim_threshold: bad, ..FilterConfig::default() };
            assert!(cfg.validate().is_err());
        }
        let cfg = FilterConfig { max_answer_tokens: 0, ..FilterConfig::default() };
        assert!(cfg.validate().is_err());
    }

    fn twelve_pairs() -> (Vec<QAPair>, HashMap<String, String>) {
        let long = vec!["word"; 31].join(" ");
        let rows = [
            ("What did John start in February?", "a community food drive", "a community food drive"),
            ("Why did John start the food drive?", "unemployment in his community", "unemployment in his community"),
            ("Did John buy a car?", "a car", "-"),
            ("Where does Maria volunteer?", "I do not know", "-"),
            ("What is John's favorite color?", "Not mentioned.", "-"),
            ("Describe everything John said.", long.as_str(), "-"),
            ("Who helped John at the shelter?", "Maria", "a stranger from the bus"),
            ("What pet did Maria adopt?", "a puppy named Coco", "a puppy named Coco"),
            ("How does John commute?", "by bike", "by bike"),
            ("What did Maria bake?", "banana bread", "banana bread"),
            ("When did John run the marathon?", "16 July, 2023", "16 July, 2023"),
            ("What does Maria study?", "nursing", "nursing"),
        ];
        let teacher = rows.iter().map(|(q, _, t)| (q.to_string(), t.to_string())).collect();
        (rows.iter().map(|(q, a, _)| pair(q, a)).collect(), teacher)
    }

    #[test]
    fn twelve_pair_fixture_keeps_seven() {
        let (pairs, teacher) = twelve_pairs();
        let embedder = HashEmbedder::new(4096);
        let out = run_filters(
            pairs.clone(),
            &FilterConfig::default(),
            ws,
            |p| Ok::<_, ()>(teacher[&p.question].clone()),
            |a, b| Ok(crate::gateway::cosine(&embedder.vector(a), &embedder.vector(b))),
        )
        .unwrap();
        assert_eq!(out.kept.len(), 7);
        let statuses: Vec<FilterStatus> = out.audit.iter().map(|e| e.pair.filter_status).collect();
        assert_eq!(
            statuses,
            vec![
                FilterStatus::DroppedTrivial,
                FilterStatus::DroppedUnanswerable,
                FilterStatus::DroppedUnanswerable,
                FilterStatus::DroppedTooLong,
                FilterStatus::DroppedInconsistent,
            ]
        );
        let inconsistent = &out.audit[4].pair;
        assert!(inconsistent.similarity.unwrap() < 0.5);
        assert!(out.kept.iter().all(|p| p.similarity == Some(1.0)));
        // Order of kept pairs follows generation order.
        let kept_q: Vec<&str> = out.kept.iter().map(|p| p.question.as_str()).collect();
        let expected: Vec<&str> = pairs
            .iter()
            .map(|p| p.question.as_str())
            .filter(|q| kept_q.contains(q))
            .collect();
        assert_eq!(kept_q, expected);
        assert_eq!(out.kept.len() + out.audit.len(), pairs.len());
    }

    #[test]
    fn similarity_exactly_half_is_kept() {
        let out = run_filters(
            vec![pair("What did Maria bake?", "banana bread")],
            &FilterConfig::default(),
            ws,
            |_| Ok::<_, ()>("bread".into()),
            |_, _| Ok(0.5),
        )
        .unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].similarity, Some(0.5));
    }

    fn session() -> Session {
        validate_session(RawSession {
            session_id: "session_6".into(),
            timestamp: "2:33 pm on 5 February, 2023".into(),
            turns: vec![
                Turn { speaker: "John".into(), text: "I started a food drive because so many neighbors lost their jobs.".into(), position: 0 },
                Turn { speaker: "Maria".into(), text: "That's wonderful.".into(), position: 1 },
            ],
            participants: ("John".into(), "Maria".into()),
        })
        .unwrap()
    }

    fn gateway(chat: Arc<CannedChat>) -> Gateway {
        Gateway::new(chat, Arc::new(HashEmbedder::new(256)), Arc::new(WhitespaceCounter))
    }

    #[test]
    fn generation_parses_and_zero_makes_no_call() {
        let chat = Arc::new(CannedChat::new([
            r#"[{"question": "Why did John start the food drive?", "answer": "unemployment in his community"}, {"question": "", "answer": "x"}] #END"#,
            "[] #END",
        ]));
        let gw = gateway(chat.clone());
        let prompts = PromptSet::builtin();
        let s = session();
        let pairs = generate_qa(&gw, &prompts, &s, "John", 5, 256).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].answer, "unemployment in his community");
        assert_eq!(pairs[0].source_session, "session_6");
        assert!(chat.requests()[0].user.contains("2:33 pm on 5 February, 2023"));
        assert!(generate_qa(&gw, &prompts, &s, "John", 5, 256).unwrap().is_empty());
        assert!(generate_qa(&gw, &prompts, &s, "John", 0, 256).unwrap().is_empty());
        assert_eq!(chat.requests().len(), 2);
        assert!(matches!(generate_qa(&gw, &prompts, &s, "Zed", 5, 256), Err(SynthError::UnknownSpeaker(_))));
    }

    #[test]
    fn build_dataset_end_to_end() {
        let chat = Arc::new(CannedChat::new([
            r#"[{"question": "Why did John start the food drive?", "answer": "neighbors lost their jobs"}, {"question": "Did John start a food drive?", "answer": "a food drive"}]"#,
            "neighbors lost their jobs",
        ]));
        let gw = gateway(chat.clone());
        let s = session();
        let context = crate::domain::render_history(std::slice::from_ref(&s));
        let d = build_dataset(&gw, &PromptSet::builtin(), &[s], "John", &context, &FilterConfig::default(), SynthConfig::default()).unwrap();
        assert_eq!(d.kept.len(), 1);
        assert_eq!(d.kept[0].teacher_answer.as_deref(), Some("neighbors lost their jobs"));
        assert_eq!(d.audit[0].pair.filter_status, FilterStatus::DroppedTrivial);
        let teacher_req = &chat.requests()[1];
        assert!(teacher_req.user.contains("I started a food drive"));
        assert!(build_dataset(&gw, &PromptSet::builtin(), &[], "John", "", &FilterConfig::default(), SynthConfig::default()).unwrap().kept.is_empty());
    }
}
