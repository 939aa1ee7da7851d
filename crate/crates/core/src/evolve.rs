//! The memory manager: prompt rendering, decision parsing and the
//! ADD / UPDATE / RECONCILE / IGNORE state machine.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    Action, AppliedDecision, DomainError, EvolutionDecision, LineageRecord, MemoryEntry,
    MemoryStore, Observation, Timestamp,
};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::jsonish;
use crate::prompts::{PromptError, PromptSet, EVOLUTION, EVOLUTION_REPAIR};
use crate::temporal;

pub const EMPTY_STORE_MARKER: &str = "(empty: no memories stored yet)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionParseError {
    #[error("response is not a JSON list: {0}")]
    NotJson(String),
    #[error("expected {expected} decisions, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("decision {position}: invalid action {value:?}")]
    InvalidAction { position: usize, value: String },
    #[error("decision {position}: {action} requires an index")]
    MissingIndex { position: usize, action: Action },
    #[error("decision {position}: {action} requires refined_observation")]
    MissingRefined { position: usize, action: Action },
}

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("observation for {found:?} in a batch for {expected:?}")]
    SpeakerMismatch { expected: String, found: String },
    #[error("decision {position} references missing index {index}")]
    DanglingIndex { position: usize, index: u64 },
    #[error("store has {entries} entries, above the budget of {budget}")]
    StoreTooLarge { entries: usize, budget: usize },
    #[error(transparent)]
    Invalid(#[from] DomainError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("store io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    pub max_tokens: u32,
    /// Stores above this size are refused rather than rendered.
    pub entry_budget: usize,
    /// Turn a decision whose dates disagree with the resolver into IGNORE.
    pub grounding_veto: bool,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            max_tokens: 2048,
            entry_budget: 500,
            grounding_veto: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionBatch {
    pub decisions: Vec<EvolutionDecision>,
    pub source_session: String,
    pub store_version_before: u64,
    pub store_version_after: u64,
    /// True when the manager output was unusable and every observation became an ADD.
    pub fallback: bool,
    pub warnings: Vec<String>,
}

pub fn render_store(store: &MemoryStore) -> String {
    if store.is_empty() {
        return EMPTY_STORE_MARKER.to_string();
    }
    store
        .entries
        .values()
        .map(|e| format!("[{}] {}", e.index, e.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_evolution_prompt(
    prompts: &PromptSet,
    store: &MemoryStore,
    new_obs: &[Observation],
    speaker: &str,
    timestamp: &str,
) -> Result<String, EvolveError> {
    if let Some(o) = new_obs.iter().find(|o| o.subject != speaker) {
        return Err(EvolveError::SpeakerMismatch {
            expected: speaker.to_string(),
            found: o.subject.clone(),
        });
    }
    let obs_list = new_obs
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {}", i + 1, o.text))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(prompts.get(EVOLUTION).render(&[
        ("speaker", speaker),
        ("current_memory", &render_store(store)),
        ("timestamp", timestamp),
        ("new_obs_list", &obs_list),
    ])?)
}

fn parse_index(v: Option<&Value>) -> Option<u64> {
    match v? {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().trim_matches(['[', ']']).parse().ok(),
        _ => None,
    }
}

fn parse_text(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        _ => None,
    }
}

/// Parses the manager's decision list.
///
/// Two harmless slips are normalized instead of rejected: an index on ADD and
/// refined text on IGNORE are both dropped.
pub fn parse_decisions(
    raw: &str,
    expected_count: usize,
) -> Result<Vec<EvolutionDecision>, DecisionParseError> {
    let recovered =
        jsonish::parse_lenient(raw, '[', ']').map_err(DecisionParseError::NotJson)?;
    let items = match recovered.value {
        Value::Array(items) => items,
        // A lone object is accepted as a one-element list.
        obj @ Value::Object(_) => vec![obj],
        other => {
            return Err(DecisionParseError::NotJson(format!(
                "expected a list, found {}",
                json_kind(&other)
            )))
        }
    };
    if items.len() != expected_count {
        return Err(DecisionParseError::WrongLength {
            expected: expected_count,
            got: items.len(),
        });
    }
    items
        .iter()
        .enumerate()
        .map(|(position, item)| {
            let Value::Object(map) = item else {
                return Err(DecisionParseError::NotJson(format!(
                    "decision {position} is {}",
                    json_kind(item)
                )));
            };
            let action_raw = map.get("action").and_then(Value::as_str).unwrap_or("");
            let action =
                Action::parse(action_raw).ok_or_else(|| DecisionParseError::InvalidAction {
                    position,
                    value: action_raw.to_string(),
                })?;
            let original_obs = map
                .get("original_obs")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            let index = parse_index(map.get("index"));
            let refined = parse_text(map.get("refined_observation"));
            let decision = match action {
                Action::Add => EvolutionDecision {
                    original_obs,
                    action,
                    index: None,
                    refined_observation: Some(
                        refined.ok_or(DecisionParseError::MissingRefined { position, action })?,
                    ),
                },
                Action::Update | Action::Reconcile => EvolutionDecision {
                    original_obs,
                    action,
                    index: Some(index.ok_or(DecisionParseError::MissingIndex { position, action })?),
                    refined_observation: Some(
                        refined.ok_or(DecisionParseError::MissingRefined { position, action })?,
                    ),
                },
                Action::Ignore => EvolutionDecision::ignore(original_obs),
            };
            Ok(decision)
        })
        .collect()
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "an object",
    }
}

/// Applies one decision in place. Callers must have checked that the index exists.
fn apply_one(store: &mut MemoryStore, decision: &EvolutionDecision, session_id: &str, at: &Timestamp) {
    let lineage = LineageRecord {
        session_id: session_id.to_string(),
        action: decision.action,
    };
    let text = decision.refined_observation.clone().unwrap_or_default();
    let mut assigned_index = None;
    match decision.action {
        Action::Add => {
            let index = store.next_index;
            store.entries.insert(
                index,
                MemoryEntry {
                    index,
                    text,
                    created_at: at.clone(),
                    revised_at: at.clone(),
                    revision_count: 0,
                    lineage: vec![lineage],
                },
            );
            store.next_index += 1;
            store.version += 1;
            assigned_index = Some(index);
        }
        Action::Update | Action::Reconcile => {
            let index = decision.index.expect("validated");
            let entry = store.entries.get_mut(&index).expect("validated");
            entry.text = text;
            entry.revised_at = at.clone().max(entry.created_at.clone());
            entry.revision_count += 1;
            entry.lineage.push(lineage);
            store.version += 1;
        }
        Action::Ignore => {}
    }
    store.event_log.push(AppliedDecision {
        seq: store.event_log.len() as u64,
        session_id: session_id.to_string(),
        at: at.clone(),
        decision: decision.clone(),
        assigned_index,
    });
}

/// Applies a batch atomically, returning the new store. The input is never modified.
pub fn apply(
    store: &MemoryStore,
    decisions: &[EvolutionDecision],
    session_id: &str,
    at: &Timestamp,
) -> Result<MemoryStore, EvolveError> {
    let mut next = store.clone();
    for (position, d) in decisions.iter().enumerate() {
        d.validate()?;
        if let (Action::Update | Action::Reconcile, Some(index)) = (d.action, d.index) {
            // Indices allocated earlier in the same batch are valid targets.
            if !next.entries.contains_key(&index) {
                return Err(EvolveError::DanglingIndex { position, index });
            }
        }
        apply_one(&mut next, d, session_id, at);
    }
    Ok(next)
}

/// Rebuilds a store by folding an event log from empty.
pub fn replay(owner: &str, log: &[AppliedDecision]) -> Result<MemoryStore, EvolveError> {
    let mut store = MemoryStore::new(owner);
    for (position, event) in log.iter().enumerate() {
        store = apply(
            &store,
            std::slice::from_ref(&event.decision),
            &event.session_id,
            &event.at,
        )
        .map_err(|e| match e {
            EvolveError::DanglingIndex { index, .. } => EvolveError::DanglingIndex { position, index },
            other => other,
        })?;
    }
    Ok(store)
}

fn grounding_warnings(decisions: &mut [EvolutionDecision], at: &Timestamp, veto: bool) -> Vec<String> {
    let mut warnings = Vec::new();
    for (i, d) in decisions.iter_mut().enumerate() {
        let Some(text) = &d.refined_observation else {
            continue;
        };
        let issues = temporal::check_grounding(text, at.date());
        if issues.is_empty() {
            continue;
        }
        for issue in &issues {
            warnings.push(format!(
                "decision {i}: {:?} stated as {} but resolves to {}",
                issue.phrase, issue.stated, issue.expected
            ));
        }
        if veto {
            warnings.push(format!("decision {i}: vetoed to IGNORE"));
            *d = EvolutionDecision::ignore(d.original_obs.clone());
        }
    }
    warnings
}

fn fallback_decisions(observations: &[Observation]) -> Vec<EvolutionDecision> {
    observations
        .iter()
        .map(|o| EvolutionDecision::add(o.text.clone(), o.text.clone()))
        .collect()
}

/// Runs one manager round: render, complete, parse, apply.
///
/// An unusable response (unparseable, wrong length, or pointing at a missing
/// index) gets one repair attempt; if that also fails every observation is
/// stored as an ADD and the batch is flagged.
pub fn evolve(
    gateway: &Gateway,
    prompts: &PromptSet,
    store: &MemoryStore,
    observations: &[Observation],
    session_id: &str,
    at: &Timestamp,
    config: EvolveConfig,
) -> Result<(MemoryStore, EvolutionBatch), EvolveError> {
    if store.len() > config.entry_budget {
        return Err(EvolveError::StoreTooLarge {
            entries: store.len(),
            budget: config.entry_budget,
        });
    }
    let mut batch = EvolutionBatch {
        decisions: Vec::new(),
        source_session: session_id.to_string(),
        store_version_before: store.version,
        store_version_after: store.version,
        fallback: false,
        warnings: Vec::new(),
    };
    if observations.is_empty() {
        return Ok((store.clone(), batch));
    }
    let prompt = render_evolution_prompt(prompts, store, observations, &store.owner, at.raw())?;
    let mut user = prompt.clone();
    for attempt in 0..2 {
        let response = gateway.complete(&ChatRequest::greedy("", user.clone(), config.max_tokens))?;
        let outcome = parse_decisions(&response.text, observations.len())
            .map_err(|e| e.to_string())
            .and_then(|mut decisions| {
                let warnings = grounding_warnings(&mut decisions, at, config.grounding_veto);
                let next = apply(store, &decisions, session_id, at).map_err(|e| e.to_string())?;
                Ok((next, decisions, warnings))
            });
        match outcome {
            Ok((next, decisions, warnings)) => {
                for w in &warnings {
                    tracing::warn!(session = session_id, "{w}");
                }
                batch.warnings.extend(warnings);
                batch.store_version_after = next.version;
                batch.decisions = decisions;
                return Ok((next, batch));
            }
            Err(reason) => {
                tracing::warn!(session = session_id, attempt, "manager output rejected: {reason}");
                batch.warnings.push(format!("attempt {attempt}: {reason}"));
                let repair = prompts.get(EVOLUTION_REPAIR).render(&[
                    ("error", &reason),
                    ("count", &observations.len().to_string()),
                ])?;
                user = format!("{prompt}{repair}");
            }
        }
    }
    tracing::warn!(session = session_id, "falling back to ADD for all observations");
    let decisions = fallback_decisions(observations);
    let next = apply(store, &decisions, session_id, at)?;
    batch.fallback = true;
    batch.warnings.push("fallback: all observations stored as ADD".into());
    batch.store_version_after = next.version;
    batch.decisions = decisions;
    Ok((next, batch))
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvolveError> {
    let io = |e: std::io::Error| EvolveError::Io(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| EvolveError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvolveError> {
    let file = fs::File::open(path).map_err(|e| EvolveError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvolveError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| EvolveError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Snapshot header written as the first line of a store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    owner: String,
    next_index: u64,
    version: u64,
}

/// Persists a store as `<dir>/<owner>.store.jsonl` (header + entries) and
/// `<dir>/<owner>.events.jsonl`.
pub fn save_store(dir: &Path, store: &MemoryStore) -> Result<(), EvolveError> {
    let header = serde_json::to_value(StoreHeader {
        owner: store.owner.clone(),
        next_index: store.next_index,
        version: store.version,
    })
    .map_err(|e| EvolveError::Io(e.to_string()))?;
    let mut lines = vec![header];
    for entry in store.entries.values() {
        lines.push(serde_json::to_value(entry).map_err(|e| EvolveError::Io(e.to_string()))?);
    }
    write_jsonl(&dir.join(format!("{}.store.jsonl", file_stem(&store.owner))), &lines)?;
    write_jsonl(
        &dir.join(format!("{}.events.jsonl", file_stem(&store.owner))),
        &store.event_log,
    )
}

pub fn load_store(dir: &Path, owner: &str) -> Result<Option<MemoryStore>, EvolveError> {
    let store_path = dir.join(format!("{}.store.jsonl", file_stem(owner)));
    if !store_path.exists() {
        return Ok(None);
    }
    let lines: Vec<Value> = read_jsonl(&store_path)?;
    let mut iter = lines.into_iter();
    let header: StoreHeader = iter
        .next()
        .ok_or_else(|| EvolveError::Io(format!("{}: empty file", store_path.display())))
        .and_then(|v| serde_json::from_value(v).map_err(|e| EvolveError::Io(e.to_string())))?;
    let mut store = MemoryStore::new(header.owner);
    store.next_index = header.next_index;
    store.version = header.version;
    for v in iter {
        let entry: MemoryEntry =
            serde_json::from_value(v).map_err(|e| EvolveError::Io(e.to_string()))?;
        store.entries.insert(entry.index, entry);
    }
    store.event_log = read_jsonl(&dir.join(format!("{}.events.jsonl", file_stem(owner))))?;
    Ok(Some(store))
}

/// Owner names become file names; anything outside `[A-Za-z0-9_-]` becomes `_`.
pub fn file_stem(owner: &str) -> String {
    owner
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::stub::{CannedChat, HashEmbedder, WhitespaceCounter};
    use crate::gateway::RetryPolicy;

    fn ts(raw: &str) -> Timestamp {
        Timestamp::parse(raw).unwrap()
    }

    fn obs(subject: &str, text: &str) -> Observation {
        Observation {
            subject: subject.into(),
            text: text.into(),
            source_session: "s".into(),
            extracted_at: ts("5 February, 2023"),
        }
    }

    fn gateway(chat: Arc<CannedChat>) -> Gateway {
        Gateway::new(chat, Arc::new(HashEmbedder::new(8)), Arc::new(WhitespaceCounter))
            .with_retry(RetryPolicy::immediate(1))
    }

    const FOOD_DRIVE: &str = "On 5 February, 2023, John initiated a community food drive due to the impact of unemployment on his neighbors.";
    const MERGED: &str = "On 5 February, 2023, John initiated a community food drive due to the impact of unemployment on his neighbors. On 5 August, 2023, John said he has had little time to volunteer lately but still values the work.";

    /// John's store with entry 22 holding the food-drive narrative.
    fn john_store() -> MemoryStore {
        let mut store = MemoryStore::new("John");
        let at = ts("2:33 pm on 5 February, 2023");
        for i in 0..22 {
            store = apply(&store, &[EvolutionDecision::add("o", format!("John fact {i}."))], "session_1", &at).unwrap();
        }
        apply(&store, &[EvolutionDecision::add("food drive", FOOD_DRIVE)], "session_6", &at).unwrap()
    }

    #[test]
    fn prompt_renders_store_lines_and_numbered_observations() {
        let prompts = PromptSet::builtin();
        let store = john_store();
        let p = render_evolution_prompt(
            &prompts,
            &store,
            &[obs("John", "John volunteered again."), obs("John", "John likes soup.")],
            "John",
            "1:14 pm on 12 August, 2023",
        )
        .unwrap();
        assert!(p.contains(&format!("[22] {FOOD_DRIVE}")));
        assert!(p.contains("1. John volunteered again.\n2. John likes soup."));
        assert!(p.contains("[session date : 1:14 pm on 12 August, 2023 (context: today)]"));
        for action in ["\"ADD\": Brand new", "\"UPDATE\": New info", "\"RECONCILE\": New info", "\"IGNORE\": The info"] {
            assert!(p.contains(action), "{action}");
        }
    }

    #[test]
    fn empty_store_marker_and_speaker_mismatch() {
        let prompts = PromptSet::builtin();
        let store = MemoryStore::new("John");
        let p = render_evolution_prompt(&prompts, &store, &[obs("John", "x")], "John", "t").unwrap();
        assert!(p.contains(EMPTY_STORE_MARKER));
        let err = render_evolution_prompt(&prompts, &store, &[obs("John", "x"), obs("Maria", "y")], "John", "t");
        assert!(matches!(err, Err(EvolveError::SpeakerMismatch { .. })));
    }

    #[test]
    fn parse_examples() {
        let d = parse_decisions(
            r#"[{"original_obs": "x", "action": "ADD", "index": null, "refined_observation": "John x."}] #END"#,
            1,
        )
        .unwrap();
        assert_eq!(d[0].action, Action::Add);

        let raw = serde_json::json!([{
            "original_obs": "John volunteered again.",
            "action": "RECONCILE",
            "index": 22,
            "refined_observation": MERGED,
        }])
        .to_string();
        let d = parse_decisions(&raw, 1).unwrap();
        assert_eq!((d[0].action, d[0].index), (Action::Reconcile, Some(22)));

        let two = r#"[{"action": "IGNORE"}, {"action": "IGNORE"}]"#;
        assert_eq!(
            parse_decisions(two, 3),
            Err(DecisionParseError::WrongLength { expected: 3, got: 2 })
        );
    }

    #[test]
    fn parse_errors_and_normalizations() {
        assert!(matches!(parse_decisions("nope", 1), Err(DecisionParseError::NotJson(_))));
        assert!(matches!(
            parse_decisions(r#"[{"action": "DELETE", "index": 1}]"#, 1),
            Err(DecisionParseError::InvalidAction { .. })
        ));
        assert!(matches!(
            parse_decisions(r#"[{"action": "UPDATE", "refined_observation": "x"}]"#, 1),
            Err(DecisionParseError::MissingIndex { .. })
        ));
        assert!(matches!(
            parse_decisions(r#"[{"action": "RECONCILE", "index": 3, "refined_observation": ""}]"#, 1),
            Err(DecisionParseError::MissingRefined { .. })
        ));
        let d = parse_decisions(
            r#"[{"action": "add", "index": 4, "refined_observation": "x"}, {"action": "IGNORE", "index": null, "refined_observation": "y"}, {"action": "UPDATE", "index": "[7]", "refined_observation": "z"}]"#,
            3,
        )
        .unwrap();
        assert_eq!(d[0].index, None);
        assert_eq!(d[1].refined_observation, None);
        assert_eq!(d[2].index, Some(7));
        assert!(parse_decisions("[] #END", 0).unwrap().is_empty());
    }

    #[test]
    fn add_to_empty_store() {
        let store = MemoryStore::new("John");
        let next = apply(&store, &[EvolutionDecision::add("x", "x")], "s1", &ts("1 May, 2023")).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next.get(0).unwrap().text, "x");
        assert_eq!(next.next_index, 1);
        assert!(store.is_empty());
    }

    #[test]
    fn reconcile_keeps_index_and_created_at() {
        let store = john_store();
        let at = ts("1:14 pm on 12 August, 2023");
        let next = apply(
            &store,
            &[EvolutionDecision::reconcile("John volunteered again.", 22, MERGED)],
            "session_28",
            &at,
        )
        .unwrap();
        let e = next.get(22).unwrap();
        assert!(e.text.contains("On 5 February, 2023") && e.text.contains("On 5 August, 2023"));
        assert_eq!(e.created_at, store.get(22).unwrap().created_at);
        assert_eq!(e.revised_at, at);
        assert_eq!(e.revision_count, 1);
        assert_eq!(e.lineage.len(), 2);
        assert_eq!(e.lineage[1].action, Action::Reconcile);
        assert_eq!(next.len(), store.len());
        assert!(next.version > store.version);
    }

    #[test]
    fn ignore_grows_only_the_log() {
        let store = john_store();
        let next = apply(&store, &[EvolutionDecision::ignore("chatter")], "s", &ts("1 May, 2023")).unwrap();
        assert_eq!(next.entries, store.entries);
        assert_eq!(next.version, store.version);
        assert_eq!(next.event_log.len(), store.event_log.len() + 1);
    }

    #[test]
    fn dangling_index_rejects_the_whole_batch() {
        let store = john_store();
        let err = apply(
            &store,
            &[EvolutionDecision::add("a", "a"), EvolutionDecision::update("b", 999, "b")],
            "s",
            &ts("1 May, 2023"),
        )
        .unwrap_err();
        assert!(matches!(err, EvolveError::DanglingIndex { position: 1, index: 999 }));
    }

    #[test]
    fn same_batch_targets_apply_in_order() {
        let store = MemoryStore::new("A");
        let at = ts("1 May, 2023");
        let next = apply(
            &store,
            &[
                EvolutionDecision::add("a", "first"),
                EvolutionDecision::update("b", 0, "second"),
                EvolutionDecision::update("c", 0, "third"),
            ],
            "s",
            &at,
        )
        .unwrap();
        assert_eq!(next.get(0).unwrap().text, "third");
        assert_eq!(next.get(0).unwrap().revision_count, 2);
    }

    #[test]
    fn replay_reproduces_the_store() {
        let store = john_store();
        let next = apply(
            &store,
            &[EvolutionDecision::reconcile("v", 22, MERGED), EvolutionDecision::ignore("i")],
            "session_28",
            &ts("12 August, 2023"),
        )
        .unwrap();
        let rebuilt = replay("John", &next.event_log).unwrap();
        assert_eq!(serde_json::to_vec(&rebuilt).unwrap(), serde_json::to_vec(&next).unwrap());
    }

    #[test]
    fn evolve_reconciles_entry_22() {
        let reply = serde_json::json!([
            {"original_obs": "John has had little time to volunteer lately.", "action": "RECONCILE", "index": 22, "refined_observation": MERGED}
        ])
        .to_string()
            + " #END";
        let chat = Arc::new(CannedChat::new([reply]));
        let gw = gateway(chat.clone());
        let store = john_store();
        let (next, batch) = evolve(
            &gw,
            &PromptSet::builtin(),
            &store,
            &[obs("John", "John has had little time to volunteer lately.")],
            "session_28",
            &ts("5:19 pm on 5 August, 2023"),
            EvolveConfig::default(),
        )
        .unwrap();
        assert_eq!(batch.decisions[0].action, Action::Reconcile);
        assert_eq!(batch.decisions[0].index, Some(22));
        assert!(!batch.fallback);
        assert!(batch.store_version_after > batch.store_version_before);
        assert!(next.get(22).unwrap().text.contains("5 August, 2023"));
        assert!(batch.warnings.is_empty(), "{:?}", batch.warnings);
        assert_eq!(chat.requests().len(), 1);
    }

    #[test]
    fn ignore_only_reply_leaves_text_unchanged() {
        let chat = Arc::new(CannedChat::new([r#"[{"original_obs": "hi", "action": "IGNORE", "index": null, "refined_observation": null}]"#]));
        let store = john_store();
        let (next, batch) = evolve(
            &gateway(chat),
            &PromptSet::builtin(),
            &store,
            &[obs("John", "hi")],
            "s",
            &ts("12 August, 2023"),
            EvolveConfig::default(),
        )
        .unwrap();
        assert_eq!(next.entries, store.entries);
        assert_eq!(batch.store_version_after, batch.store_version_before);
    }

    #[test]
    fn malformed_twice_falls_back_to_add() {
        let chat = Arc::new(CannedChat::new(["garbage", "still garbage"]));
        let store = MemoryStore::new("John");
        let observations = [obs("John", "John has a dog."), obs("John", "John runs.")];
        let (next, batch) = evolve(
            &gateway(chat.clone()),
            &PromptSet::builtin(),
            &store,
            &observations,
            "s",
            &ts("12 August, 2023"),
            EvolveConfig::default(),
        )
        .unwrap();
        assert!(batch.fallback);
        assert!(batch.decisions.iter().all(|d| d.action == Action::Add));
        assert_eq!(next.len(), 2);
        let reqs = chat.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].user.contains("could not be parsed"));
        assert!(reqs[1].user.contains("exactly 2 objects"));
    }

    #[test]
    fn repair_succeeds_on_second_attempt() {
        let chat = Arc::new(CannedChat::new([
            r#"[{"action": "UPDATE", "index": 5, "refined_observation": "x"}]"#.to_string(),
            r#"[{"action": "ADD", "index": null, "refined_observation": "John x."}]"#.to_string(),
        ]));
        let (next, batch) = evolve(
            &gateway(chat),
            &PromptSet::builtin(),
            &MemoryStore::new("John"),
            &[obs("John", "x")],
            "s",
            &ts("12 August, 2023"),
            EvolveConfig::default(),
        )
        .unwrap();
        assert!(!batch.fallback);
        assert_eq!(next.len(), 1);
        assert!(batch.warnings[0].contains("missing index 5"));
    }

    #[test]
    fn grounding_veto_is_opt_in() {
        let bad = r#"[{"action": "ADD", "index": null, "refined_observation": "On 1 January, 2020 (context: yesterday), John ran."}]"#;
        let run = |veto: bool| {
            let chat = Arc::new(CannedChat::new([bad]));
            evolve(
                &gateway(chat),
                &PromptSet::builtin(),
                &MemoryStore::new("John"),
                &[obs("John", "John ran yesterday.")],
                "s",
                &ts("12 August, 2023"),
                EvolveConfig { grounding_veto: veto, ..EvolveConfig::default() },
            )
            .unwrap()
        };
        let (store, batch) = run(false);
        assert_eq!(store.len(), 1);
        assert!(batch.warnings[0].contains("11 August, 2023"));
        let (store, batch) = run(true);
        assert!(store.is_empty());
        assert_eq!(batch.decisions[0].action, Action::Ignore);
    }

    #[test]
    fn store_budget_and_empty_batch() {
        let store = john_store();
        let chat = Arc::new(CannedChat::new(Vec::<String>::new()));
        let gw = gateway(chat.clone());
        let cfg = EvolveConfig { entry_budget: 5, ..EvolveConfig::default() };
        let err = evolve(&gw, &PromptSet::builtin(), &store, &[obs("John", "x")], "s", &ts("1 May, 2023"), cfg);
        assert!(matches!(err, Err(EvolveError::StoreTooLarge { .. })));
        let (next, batch) = evolve(&gw, &PromptSet::builtin(), &store, &[], "s", &ts("1 May, 2023"), EvolveConfig::default()).unwrap();
        assert_eq!(next, store);
        assert!(batch.decisions.is_empty());
        assert!(chat.requests().is_empty());
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = john_store();
        save_store(dir.path(), &store).unwrap();
        let loaded = load_store(dir.path(), "John").unwrap().unwrap();
        assert_eq!(loaded, store);
        assert!(load_store(dir.path(), "Nobody").unwrap().is_none());
    }

    /// Turns (kind, pick) pairs into a batch that is valid against `store`.
    fn build_batch(store: &MemoryStore, ops: &[(u8, usize)]) -> Vec<EvolutionDecision> {
        let mut live: Vec<u64> = store.entries.keys().copied().collect();
        let mut next = store.next_index;
        ops.iter()
            .enumerate()
            .map(|(i, &(kind, pick))| match kind {
                1 | 2 if !live.is_empty() => {
                    let idx = live[pick % live.len()];
                    if kind == 1 {
                        EvolutionDecision::update(format!("o{i}"), idx, format!("u{i}"))
                    } else {
                        EvolutionDecision::reconcile(format!("o{i}"), idx, format!("r{i}"))
                    }
                }
                3 => EvolutionDecision::ignore(format!("o{i}")),
                _ => {
                    live.push(next);
                    next += 1;
                    EvolutionDecision::add(format!("o{i}"), format!("a{i}"))
                }
            })
            .collect()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn batches() -> impl Strategy<Value = Vec<Vec<(u8, usize)>>> {
            prop::collection::vec(prop::collection::vec((0u8..4, 0usize..64), 1..6), 1..6)
        }

        proptest! {
            #[test]
            fn entries_are_never_removed(plan in batches()) {
                let mut store = MemoryStore::new("p");
                for (b, ops) in plan.iter().enumerate() {
                    let batch = build_batch(&store, ops);
                    let adds = batch.iter().filter(|d| d.action == Action::Add).count();
                    let at = ts(&format!("1:00 pm on {} May, 2023", b + 1));
                    let next = apply(&store, &batch, &format!("s{b}"), &at).unwrap();
                    prop_assert!(store.entries.keys().all(|k| next.entries.contains_key(k)));
                    prop_assert_eq!(next.len(), store.len() + adds);
                    store = next;
                }
                prop_assert_eq!(replay("p", &store.event_log).unwrap(), store);
            }

            #[test]
            fn dangling_batches_leave_the_store_alone(plan in batches(), extra in 0u64..8) {
                let mut store = MemoryStore::new("p");
                let at = ts("1:00 pm on 1 May, 2023");
                for ops in &plan {
                    store = apply(&store, &build_batch(&store, ops), "s", &at).unwrap();
                }
                let before = store.clone();
                let mut batch = build_batch(&store, &plan[0]);
                let missing = store.next_index + batch.len() as u64 + extra;
                batch.push(EvolutionDecision::update("x", missing, "y"));
                let is_dangling = matches!(
                    apply(&store, &batch, "bad", &at),
                    Err(EvolveError::DanglingIndex { .. })
                );
                prop_assert!(is_dangling);
                prop_assert_eq!(store, before);
            }
        }
    }
}
