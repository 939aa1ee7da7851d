//! Core value types shared across the engine.
//!
//! Everything here is a plain value: cheap to clone, safe to share across
//! threads, and serializable as one JSON object per line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temporal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("session {0} has no turns")]
    EmptySession(String),
    #[error("unparseable timestamp {0:?}")]
    UnparseableTimestamp(String),
    #[error("session {session}: turn at position {position} has empty text")]
    BlankTurn { session: String, position: u32 },
    #[error("session {session}: duplicate turn position {position}")]
    DuplicatePosition { session: String, position: u32 },
    #[error("session {session}: speaker {speaker:?} is not a participant")]
    ForeignSpeaker { session: String, speaker: String },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
}

/// A point in time carrying both the source rendering and its parsed value.
///
/// Serializes as the original string so prompts can quote it verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Timestamp {
    raw: String,
    at: NaiveDateTime,
}

impl Timestamp {
    pub fn parse(raw: &str) -> Result<Self, DomainError> {
        temporal::parse_timestamp(raw)
            .map(|at| Timestamp {
                raw: raw.to_string(),
                at,
            })
            .ok_or_else(|| DomainError::UnparseableTimestamp(raw.to_string()))
    }

    /// A timestamp rendered in the canonical "D Month, YYYY" form.
    pub fn from_date(date: NaiveDate) -> Self {
        Timestamp {
            raw: temporal::render_date(date),
            at: date.and_hms_opt(0, 0, 0).expect("midnight is valid"),
        }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn datetime(&self) -> NaiveDateTime {
        self.at
    }

    pub fn date(&self) -> NaiveDate {
        self.at.date()
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.at.cmp(&other.at).then_with(|| self.raw.cmp(&other.raw))
    }
}

impl TryFrom<String> for Timestamp {
    type Error = DomainError;

    fn try_from(raw: String) -> Result<Self, Self::Error> {
        Timestamp::parse(&raw)
    }
}

impl From<Timestamp> for String {
    fn from(ts: Timestamp) -> String {
        ts.raw
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    pub position: u32,
}

/// A session as it arrives from a loader, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSession {
    pub session_id: String,
    pub timestamp: String,
    pub turns: Vec<Turn>,
    pub participants: (String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub timestamp: Timestamp,
    pub turns: Vec<Turn>,
    pub participants: (String, String),
}

impl Session {
    pub fn has_participant(&self, name: &str) -> bool {
        self.participants.0 == name || self.participants.1 == name
    }

    /// Plain "Speaker: text" transcript, one turn per line.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            out.push_str(&turn.speaker);
            out.push_str(": ");
            out.push_str(&turn.text);
            out.push('\n');
        }
        out
    }
}

/// Sessions rendered in order, each headed by its timestamp.
pub fn render_history(sessions: &[Session]) -> String {
    sessions
        .iter()
        .map(|s| format!("[{}]\n{}", s.timestamp.raw(), s.transcript()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Checks a loaded session and normalizes turn positions to `0..n`.
pub fn validate_session(raw: RawSession) -> Result<Session, DomainError> {
    if raw.turns.is_empty() {
        return Err(DomainError::EmptySession(raw.session_id));
    }
    let timestamp = Timestamp::parse(&raw.timestamp)?;

    let mut seen = HashSet::new();
    for turn in &raw.turns {
        if !seen.insert(turn.position) {
            return Err(DomainError::DuplicatePosition {
                session: raw.session_id.clone(),
                position: turn.position,
            });
        }
        if turn.text.trim().is_empty() {
            return Err(DomainError::BlankTurn {
                session: raw.session_id.clone(),
                position: turn.position,
            });
        }
        if turn.speaker != raw.participants.0 && turn.speaker != raw.participants.1 {
            return Err(DomainError::ForeignSpeaker {
                session: raw.session_id.clone(),
                speaker: turn.speaker.clone(),
            });
        }
    }

    let mut turns = raw.turns;
    turns.sort_by_key(|t| t.position);
    for (i, turn) in turns.iter_mut().enumerate() {
        turn.position = i as u32;
    }

    Ok(Session {
        session_id: raw.session_id,
        timestamp,
        turns,
        participants: raw.participants,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: String,
    pub text: String,
    pub source_session: String,
    pub extracted_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Add,
    Update,
    Reconcile,
    Ignore,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Add => "ADD",
            Action::Update => "UPDATE",
            Action::Reconcile => "RECONCILE",
            Action::Ignore => "IGNORE",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ADD" => Some(Action::Add),
            "UPDATE" => Some(Action::Update),
            "RECONCILE" => Some(Action::Reconcile),
            "IGNORE" => Some(Action::Ignore),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manager verdict for one incoming observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionDecision {
    pub original_obs: String,
    pub action: Action,
    pub index: Option<u64>,
    pub refined_observation: Option<String>,
}

impl EvolutionDecision {
    pub fn add(original: impl Into<String>, refined: impl Into<String>) -> Self {
        EvolutionDecision {
            original_obs: original.into(),
            action: Action::Add,
            index: None,
            refined_observation: Some(refined.into()),
        }
    }

    pub fn update(original: impl Into<String>, index: u64, refined: impl Into<String>) -> Self {
        EvolutionDecision {
            original_obs: original.into(),
            action: Action::Update,
            index: Some(index),
            refined_observation: Some(refined.into()),
        }
    }

    pub fn reconcile(original: impl Into<String>, index: u64, refined: impl Into<String>) -> Self {
        EvolutionDecision {
            original_obs: original.into(),
            action: Action::Reconcile,
            index: Some(index),
            refined_observation: Some(refined.into()),
        }
    }

    pub fn ignore(original: impl Into<String>) -> Self {
        EvolutionDecision {
            original_obs: original.into(),
            action: Action::Ignore,
            index: None,
            refined_observation: None,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let refined_ok = self
            .refined_observation
            .as_deref()
            .is_some_and(|t| !t.trim().is_empty());
        match self.action {
            Action::Add if self.index.is_some() => Err(DomainError::InvalidDecision(
                "ADD must not carry an index".into(),
            )),
            Action::Update | Action::Reconcile if self.index.is_none() => Err(
                DomainError::InvalidDecision(format!("{} requires an index", self.action)),
            ),
            Action::Ignore if self.refined_observation.is_some() => Err(
                DomainError::InvalidDecision("IGNORE must not carry refined_observation".into()),
            ),
            Action::Add | Action::Update | Action::Reconcile if !refined_ok => {
                Err(DomainError::InvalidDecision(format!(
                    "{} requires a nonempty refined_observation",
                    self.action
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub session_id: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub index: u64,
    pub text: String,
    pub created_at: Timestamp,
    pub revised_at: Timestamp,
    pub revision_count: u32,
    pub lineage: Vec<LineageRecord>,
}

/// A decision as it was committed to a store, with enough context to replay it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedDecision {
    pub seq: u64,
    pub session_id: String,
    pub at: Timestamp,
    pub decision: EvolutionDecision,
    /// Index allocated by an ADD.
    pub assigned_index: Option<u64>,
}

/// The episodic store for one owner. Mutated only by the memory evolver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub owner: String,
    pub entries: BTreeMap<u64, MemoryEntry>,
    pub next_index: u64,
    /// Number of committed decisions that changed an entry.
    pub version: u64,
    pub event_log: Vec<AppliedDecision>,
}

impl MemoryStore {
    pub fn new(owner: impl Into<String>) -> Self {
        MemoryStore {
            owner: owner.into(),
            entries: BTreeMap::new(),
            next_index: 0,
            version: 0,
            event_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&MemoryEntry> {
        self.entries.get(&index)
    }

    /// Timestamp of the most recent committed decision, if any.
    pub fn last_applied_at(&self) -> Option<&Timestamp> {
        self.event_log.last().map(|e| &e.at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Kept,
    DroppedTrivial,
    DroppedUnanswerable,
    DroppedTooLong,
    DroppedInconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub source_session: String,
    pub filter_status: FilterStatus,
    pub teacher_answer: Option<String>,
    pub similarity: Option<f64>,
}

impl QAPair {
    pub fn new(
        question: impl Into<String>,
        answer: impl Into<String>,
        source_session: impl Into<String>,
    ) -> Self {
        QAPair {
            question: question.into(),
            answer: answer.into(),
            source_session: source_session.into(),
            filter_status: FilterStatus::Kept,
            teacher_answer: None,
            similarity: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleHop,
    MultiHop,
    OpenDomain,
    Temporal,
    #[serde(alias = "adversarial")]
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::SingleHop,
        Category::MultiHop,
        Category::OpenDomain,
        Category::Temporal,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SingleHop => "single_hop",
            Category::MultiHop => "multi_hop",
            Category::OpenDomain => "open_domain",
            Category::Temporal => "temporal",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A benchmark question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub category: Category,
    /// Dataset-specific evidence references, e.g. LoCoMo dialogue ids.
    #[serde(default)]
    pub evidence: Vec<String>,
    /// Session ids holding the evidence, when resolvable.
    #[serde(default)]
    pub evidence_sessions: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(turns: Vec<Turn>) -> RawSession {
        RawSession {
            session_id: "s1".into(),
            timestamp: "2:33 pm on 5 February, 2023".into(),
            turns,
            participants: ("John".into(), "Maria".into()),
        }
    }

    fn turn(speaker: &str, text: &str, position: u32) -> Turn {
        Turn {
            speaker: speaker.into(),
            text: text.into(),
            position,
        }
    }

    #[test]
    fn three_turn_session_is_unchanged() {
        let turns = vec![
            turn("John", "hi", 0),
            turn("Maria", "hello", 1),
            turn("John", "bye", 2),
        ];
        let s = validate_session(raw(turns.clone())).unwrap();
        assert_eq!(s.turns, turns);
        assert_eq!(s.timestamp.raw(), "2:33 pm on 5 February, 2023");
    }

    #[test]
    fn empty_session_is_rejected() {
        assert_eq!(
            validate_session(raw(vec![])),
            Err(DomainError::EmptySession("s1".into()))
        );
    }

    #[test]
    fn locomo_timestamp_parses_to_calendar_date() {
        let s = validate_session(raw(vec![turn("John", "hi", 0)])).unwrap();
        assert_eq!(s.timestamp.date(), NaiveDate::from_ymd_opt(2023, 2, 5).unwrap());
        assert_eq!(
            s.timestamp.datetime().time(),
            chrono::NaiveTime::from_hms_opt(14, 33, 0).unwrap()
        );
    }

    #[test]
    fn bad_timestamp_is_rejected() {
        let mut r = raw(vec![turn("John", "hi", 0)]);
        r.timestamp = "sometime last spring".into();
        assert!(matches!(
            validate_session(r),
            Err(DomainError::UnparseableTimestamp(_))
        ));
    }

    #[test]
    fn positions_are_normalized() {
        let s = validate_session(raw(vec![
            turn("Maria", "second", 7),
            turn("John", "first", 3),
        ]))
        .unwrap();
        assert_eq!(s.turns[0].text, "first");
        assert_eq!(
            s.turns.iter().map(|t| t.position).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn duplicate_positions_and_blank_turns_are_rejected() {
        assert!(matches!(
            validate_session(raw(vec![turn("John", "a", 1), turn("Maria", "b", 1)])),
            Err(DomainError::DuplicatePosition { position: 1, .. })
        ));
        assert!(matches!(
            validate_session(raw(vec![turn("John", "   ", 0)])),
            Err(DomainError::BlankTurn { .. })
        ));
        assert!(matches!(
            validate_session(raw(vec![turn("Zed", "hey", 0)])),
            Err(DomainError::ForeignSpeaker { .. })
        ));
    }

    #[test]
    fn decision_invariants() {
        assert!(EvolutionDecision::add("o", "r").validate().is_ok());
        assert!(EvolutionDecision::ignore("o").validate().is_ok());
        assert!(EvolutionDecision::reconcile("o", 22, "merged").validate().is_ok());

        let mut d = EvolutionDecision::update("o", 1, "r");
        d.index = None;
        assert!(d.validate().is_err());

        let mut d = EvolutionDecision::add("o", "r");
        d.refined_observation = None;
        assert!(d.validate().is_err());

        let mut d = EvolutionDecision::ignore("o");
        d.refined_observation = Some("x".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn action_and_status_wire_names() {
        assert_eq!(serde_json::to_string(&Action::Reconcile).unwrap(), "\"RECONCILE\"");
        assert_eq!(
            serde_json::to_string(&FilterStatus::DroppedTooLong).unwrap(),
            "\"dropped_too_long\""
        );
        assert_eq!(
            serde_json::from_str::<Category>("\"adversarial\"").unwrap(),
            Category::Other
        );
    }

    #[test]
    fn timestamp_serializes_as_its_source_string() {
        let ts = Timestamp::parse("5:19 pm on 5 August, 2023").unwrap();
        let json = serde_json::to_string(&ts).unwrap();
        assert_eq!(json, "\"5:19 pm on 5 August, 2023\"");
        assert!(serde_json::from_str::<Timestamp>("\"garbage\"").is_err());
    }
}
