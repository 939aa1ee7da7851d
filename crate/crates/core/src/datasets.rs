//! Loaders for the LoCoMo and LongMemEval corpora.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{validate_session, Category, DomainError, QaItem, RawSession, Session, Turn};

/// Number of LoCoMo pairs kept for evaluation, counted from the end of the file.
pub const LOCOMO_RETAINED_PAIRS: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("schema mismatch at {path}: {reason}")]
    SchemaMismatch { path: String, reason: String },
    #[error("invalid session {path}: {source}")]
    Session { path: String, source: DomainError },
}

fn mismatch(path: impl Into<String>, reason: impl Into<String>) -> DatasetError {
    DatasetError::SchemaMismatch {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub pair_id: String,
    pub participants: (String, String),
    pub sessions: Vec<Session>,
    pub qa_items: Vec<QaItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversations: usize,
    pub sessions: usize,
    pub turns: usize,
    pub qa_items: usize,
    pub mean_sessions: f64,
    pub mean_turns: f64,
}

pub fn corpus_stats(convs: &[Conversation]) -> CorpusStats {
    let sessions: usize = convs.iter().map(|c| c.sessions.len()).sum();
    let turns: usize = convs
        .iter()
        .flat_map(|c| &c.sessions)
        .map(|s| s.turns.len())
        .sum();
    let n = convs.len().max(1) as f64;
    CorpusStats {
        conversations: convs.len(),
        sessions,
        turns,
        qa_items: convs.iter().map(|c| c.qa_items.len()).sum(),
        mean_sessions: sessions as f64 / n,
        mean_turns: turns as f64 / n,
    }
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| mismatch("$", format!("not valid JSON: {e}")))
}

fn get_str<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a str, DatasetError> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| mismatch(format!("{path}.{key}"), "missing or not a string"))
}

/// Answers are occasionally numbers in the published files.
fn answer_text(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
    .filter(|s| !s.is_empty())
}

fn locomo_category(code: u64) -> Option<Category> {
    match code {
        1 => Some(Category::MultiHop),
        2 => Some(Category::Temporal),
        3 => Some(Category::OpenDomain),
        4 => Some(Category::SingleHop),
        5 => Some(Category::Other),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocomoOptions {
    /// Question ids to drop, e.g. items whose evidence cannot be grounded.
    pub exclude: HashSet<String>,
    /// Keep category-5 (adversarial) items that carry a plain answer.
    pub include_adversarial: bool,
    /// Keep every pair instead of the last eight.
    pub all_pairs: bool,
}

/// Reads an exclusion list: one question id per line, `#` starts a comment.
pub fn read_exclusions(path: &Path) -> Result<HashSet<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loaded {
    pub conversations: Vec<Conversation>,
    pub warnings: Vec<String>,
}

pub fn load_locomo(path: &Path, opts: &LocomoOptions) -> Result<Loaded, DatasetError> {
    let root = read_json(path)?;
    let samples = root
        .as_array()
        .ok_or_else(|| mismatch("$", "expected a list of conversation samples"))?;
    let mut warnings = Vec::new();
    let mut conversations = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        conversations.push(parse_locomo_sample(sample, &format!("$[{i}]"), opts, &mut warnings)?);
    }
    if !opts.all_pairs && conversations.len() > LOCOMO_RETAINED_PAIRS {
        conversations.drain(..conversations.len() - LOCOMO_RETAINED_PAIRS);
    }
    if opts.exclude.is_empty() {
        warnings.push(
            "no exclusion list configured; non-groundable questions are retained".to_string(),
        );
    }
    Ok(Loaded {
        conversations,
        warnings,
    })
}

fn parse_locomo_sample(
    sample: &Value,
    path: &str,
    opts: &LocomoOptions,
    warnings: &mut Vec<String>,
) -> Result<Conversation, DatasetError> {
    let pair_id = get_str(sample, "sample_id", path)?.to_string();
    let conv_path = format!("{path}.conversation");
    let conv = sample
        .get("conversation")
        .and_then(Value::as_object)
        .ok_or_else(|| mismatch(&conv_path, "missing or not an object"))?;
    let conv_value = sample.get("conversation").expect("checked above");
    let participants = (
        get_str(conv_value, "speaker_a", &conv_path)?.to_string(),
        get_str(conv_value, "speaker_b", &conv_path)?.to_string(),
    );

    let mut numbers: Vec<u32> = conv
        .keys()
        .filter_map(|k| k.strip_prefix("session_")?.parse::<u32>().ok())
        .collect();
    numbers.sort_unstable();
    if numbers.is_empty() {
        return Err(mismatch(&conv_path, "no session_N keys"));
    }

    let mut sessions = Vec::with_capacity(numbers.len());
    for n in numbers {
        let key = format!("session_{n}");
        let spath = format!("{conv_path}.{key}");
        let turns_v = conv[&key]
            .as_array()
            .ok_or_else(|| mismatch(&spath, "expected a list of turns"))?;
        let timestamp = conv
            .get(&format!("{key}_date_time"))
            .and_then(Value::as_str)
            .ok_or_else(|| mismatch(format!("{spath}_date_time"), "missing timestamp"))?;
        let mut turns = Vec::with_capacity(turns_v.len());
        for (j, t) in turns_v.iter().enumerate() {
            let tpath = format!("{spath}[{j}]");
            let speaker = get_str(t, "speaker", &tpath)?.to_string();
            let mut text = get_str(t, "text", &tpath)?.trim().to_string();
            if let Some(caption) = t.get("blip_caption").and_then(Value::as_str) {
                text = format!("{text} [shares a photo: {caption}]").trim().to_string();
            }
            if text.is_empty() {
                warnings.push(format!("{tpath}: blank turn skipped"));
                continue;
            }
            turns.push(Turn {
                speaker,
                text,
                position: j as u32,
            });
        }
        if turns.is_empty() {
            warnings.push(format!("{spath}: empty session skipped"));
            continue;
        }
        let session = validate_session(RawSession {
            session_id: format!("{pair_id}:{key}"),
            timestamp: timestamp.to_string(),
            turns,
            participants: participants.clone(),
        })
        .map_err(|source| DatasetError::Session {
            path: spath.clone(),
            source,
        })?;
        sessions.push(session);
    }
    check_session_order(&sessions, &conv_path, warnings);

    let qa_path = format!("{path}.qa");
    let qa = sample
        .get("qa")
        .and_then(Value::as_array)
        .ok_or_else(|| mismatch(&qa_path, "missing or not a list"))?;
    let mut qa_items = Vec::with_capacity(qa.len());
    for (j, q) in qa.iter().enumerate() {
        let qpath = format!("{qa_path}[{j}]");
        let question_id = format!("{pair_id}:q{j}");
        let code = q
            .get("category")
            .and_then(Value::as_u64)
            .ok_or_else(|| mismatch(format!("{qpath}.category"), "missing or not an integer"))?;
        let category = locomo_category(code)
            .ok_or_else(|| mismatch(format!("{qpath}.category"), format!("unknown code {code}")))?;
        if category == Category::Other && !opts.include_adversarial {
            continue;
        }
        let Some(answer) = answer_text(q.get("answer")) else {
            if category == Category::Other {
                continue;
            }
            return Err(mismatch(format!("{qpath}.answer"), "missing or empty"));
        };
        if opts.exclude.contains(&question_id) {
            continue;
        }
        let evidence: Vec<String> = q
            .get("evidence")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|e| e.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let mut evidence_sessions: Vec<String> = evidence
            .iter()
            .filter_map(|e| {
                let n = e.trim().strip_prefix('D')?.split(':').next()?.parse::<u32>().ok()?;
                Some(format!("{pair_id}:session_{n}"))
            })
            .collect();
        evidence_sessions.sort();
        evidence_sessions.dedup();
        qa_items.push(QaItem {
            question_id,
            question: get_str(q, "question", &qpath)?.to_string(),
            answer,
            category,
            evidence,
            evidence_sessions,
        });
    }
    Ok(Conversation {
        pair_id,
        participants,
        sessions,
        qa_items,
    })
}

fn check_session_order(sessions: &[Session], path: &str, warnings: &mut Vec<String>) {
    for w in sessions.windows(2) {
        if w[1].timestamp.datetime() < w[0].timestamp.datetime() {
            warnings.push(format!(
                "{path}: {} is dated before {}",
                w[1].session_id, w[0].session_id
            ));
        }
    }
}

fn longmemeval_category(question_type: &str) -> Category {
    match question_type {
        "single-session-user" | "single-session-assistant" | "single-session-preference" => {
            Category::SingleHop
        }
        "multi-session" => Category::MultiHop,
        "temporal-reasoning" => Category::Temporal,
        _ => Category::Other,
    }
}

/// One conversation per test instance; sessions are sorted by date.
pub fn load_longmemeval(path: &Path) -> Result<Loaded, DatasetError> {
    let root = read_json(path)?;
    let items = root
        .as_array()
        .ok_or_else(|| mismatch("$", "expected a list of instances"))?;
    let mut warnings = Vec::new();
    let mut conversations = Vec::with_capacity(items.len());
    for (i, inst) in items.iter().enumerate() {
        let path = format!("$[{i}]");
        let question_id = get_str(inst, "question_id", &path)?.to_string();
        let question_type = get_str(inst, "question_type", &path)?;
        let question = get_str(inst, "question", &path)?.to_string();
        let answer = answer_text(inst.get("answer"))
            .ok_or_else(|| mismatch(format!("{path}.answer"), "missing or empty"))?;
        let sessions_v = inst
            .get("haystack_sessions")
            .and_then(Value::as_array)
            .ok_or_else(|| mismatch(format!("{path}.haystack_sessions"), "missing or not a list"))?;
        let dates = inst
            .get("haystack_dates")
            .and_then(Value::as_array)
            .ok_or_else(|| mismatch(format!("{path}.haystack_dates"), "missing or not a list"))?;
        if dates.len() != sessions_v.len() {
            return Err(mismatch(
                format!("{path}.haystack_dates"),
                format!("{} dates for {} sessions", dates.len(), sessions_v.len()),
            ));
        }
        let ids: Vec<String> = inst
            .get("haystack_session_ids")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let participants = ("user".to_string(), "assistant".to_string());
        let mut sessions = Vec::with_capacity(sessions_v.len());
        for (j, (s, date)) in sessions_v.iter().zip(dates).enumerate() {
            let spath = format!("{path}.haystack_sessions[{j}]");
            let date = date
                .as_str()
                .ok_or_else(|| mismatch(format!("{path}.haystack_dates[{j}]"), "not a string"))?;
            let turns_v = s
                .as_array()
                .ok_or_else(|| mismatch(&spath, "expected a list of turns"))?;
            let turns: Vec<Turn> = turns_v
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let tpath = format!("{spath}[{k}]");
                    Ok(Turn {
                        speaker: get_str(t, "role", &tpath)?.to_string(),
                        text: get_str(t, "content", &tpath)?.trim().to_string(),
                        position: k as u32,
                    })
                })
                .collect::<Result<Vec<_>, DatasetError>>()?
                .into_iter()
                .filter(|t| !t.text.is_empty())
                .collect();
            if turns.is_empty() {
                warnings.push(format!("{spath}: empty session skipped"));
                continue;
            }
            let local_id = ids.get(j).cloned().unwrap_or_else(|| format!("s{j}"));
            let session = validate_session(RawSession {
                session_id: format!("{question_id}:{local_id}"),
                timestamp: date.to_string(),
                turns,
                participants: participants.clone(),
            })
            .map_err(|source| DatasetError::Session {
                path: spath.clone(),
                source,
            })?;
            sessions.push(session);
        }
        sessions.sort_by_key(|s| s.timestamp.datetime());
        let evidence: Vec<String> = inst
            .get("answer_session_ids")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let evidence_sessions = evidence
            .iter()
            .map(|e| format!("{question_id}:{e}"))
            .collect();
        conversations.push(Conversation {
            pair_id: question_id.clone(),
            participants,
            sessions,
            qa_items: vec![QaItem {
                question_id,
                question,
                answer,
                category: longmemeval_category(question_type),
                evidence,
                evidence_sessions,
            }],
        });
    }
    Ok(Loaded {
        conversations,
        warnings,
    })
}

/// Counts per category, for reports.
pub fn category_counts(convs: &[Conversation]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for q in convs.iter().flat_map(|c| &c.qa_items) {
        *m.entry(q.category.as_str().to_string()).or_insert(0) += 1;
    }
    m
}
