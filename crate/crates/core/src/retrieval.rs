//! Exact top-k cosine retrieval over memory entries, utterances or observations.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{MemoryStore, Observation, Session};
use crate::evolve::{read_jsonl, write_jsonl, EvolveError};
use crate::gateway::{cosine, EmbeddingVector, Gateway, GatewayError};

const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate key {0}")]
    DuplicateKey(ItemKey),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query vector from {query} cannot be compared with an index built by {index}")]
    ModelMismatch { query: String, index: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("vector cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ItemRef {
    Entry { index: u64 },
    Utterance { session: String, position: u32 },
    Observation { session: String, ordinal: u32 },
}

/// Owner plus item reference. The derived order is the tie-break order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub owner: String,
    pub item: ItemRef,
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.item {
            ItemRef::Entry { index } => write!(f, "{}[{index}]", self.owner),
            ItemRef::Utterance { session, position } => {
                write!(f, "{}@{session}#u{position}", self.owner)
            }
            ItemRef::Observation { session, ordinal } => {
                write!(f, "{}@{session}#o{ordinal}", self.owner)
            }
        }
    }
}

/// What the answer prompt is grounded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Utterance,
    Observation,
    Evolving,
    /// Whole sessions in the prompt, no retrieval.
    Session,
    /// Question only.
    NoGrounding,
}

impl Variant {
    pub const RETRIEVAL: [Variant; 3] = [Variant::Utterance, Variant::Observation, Variant::Evolving];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Utterance => "utterance",
            Variant::Observation => "observation",
            Variant::Evolving => "evolving",
            Variant::Session => "session",
            Variant::NoGrounding => "no_grounding",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        Variant::RETRIEVAL.contains(&self)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "utterance" => Ok(Variant::Utterance),
            "observation" => Ok(Variant::Observation),
            "evolving" => Ok(Variant::Evolving),
            "session" => Ok(Variant::Session),
            "no_grounding" => Ok(Variant::NoGrounding),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedItem {
    pub key: ItemKey,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: IndexedItem,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub items: Vec<ScoredItem>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|s| s.item.text.as_str()).collect()
    }
}

/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub model_id: String,
    pub items: Vec<IndexedItem>,
}

impl Index {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn owners(&self) -> Vec<String> {
        let mut owners: Vec<String> = self.items.iter().map(|i| i.key.owner.clone()).collect();
        owners.sort();
        owners.dedup();
        owners
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheLine {
    model_id: String,
    text_sha256: String,
    vector: Vec<f64>,
}

/// Vectors keyed by (model id, SHA-256 of the text).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorCache {
    vectors: BTreeMap<(String, String), Vec<f64>>,
    pub hits: usize,
    pub misses: usize,
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl VectorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, model_id: &str, text: &str) -> Option<&Vec<f64>> {
        self.vectors.get(&(model_id.to_string(), text_hash(text)))
    }

    pub fn insert(&mut self, model_id: &str, text: &str, vector: Vec<f64>) {
        self.vectors
            .insert((model_id.to_string(), text_hash(text)), vector);
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let lines: Vec<CacheLine> =
            read_jsonl(path).map_err(|e: EvolveError| RetrievalError::Cache(e.to_string()))?;
        Ok(VectorCache {
            vectors: lines
                .into_iter()
                .map(|l| ((l.model_id, l.text_sha256), l.vector))
                .collect(),
            hits: 0,
            misses: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let lines: Vec<CacheLine> = self
            .vectors
            .iter()
            .map(|((model_id, text_sha256), vector)| CacheLine {
                model_id: model_id.clone(),
                text_sha256: text_sha256.clone(),
                vector: vector.clone(),
            })
            .collect();
        write_jsonl(path, &lines).map_err(|e| RetrievalError::Cache(e.to_string()))
    }
}

/// Embeds every item (through the cache when given) and builds the index.
pub fn build_index(
    gateway: &Gateway,
    items: Vec<(ItemKey, String)>,
    cache: Option<&mut VectorCache>,
) -> Result<Index, RetrievalError> {
    let mut seen = HashSet::new();
    for (key, _) in &items {
        if !seen.insert(key.clone()) {
            return Err(RetrievalError::DuplicateKey(key.clone()));
        }
    }
    let model_id = gateway.embed_model_id();
    let mut local = VectorCache::new();
    let cache = cache.unwrap_or(&mut local);

    let mut missing: Vec<String> = Vec::new();
    let mut queued = HashSet::new();
    for (_, text) in &items {
        if cache.get(&model_id, text).is_some() {
            cache.hits += 1;
        } else {
            cache.misses += 1;
            if queued.insert(text.as_str()) {
                missing.push(text.clone());
            }
        }
    }
    for chunk in missing.chunks(EMBED_BATCH) {
        let vectors = gateway.embed(chunk)?;
        for (text, v) in chunk.iter().zip(vectors) {
            cache.insert(&model_id, text, v.values);
        }
    }
    let items = items
        .into_iter()
        .map(|(key, text)| {
            let values = cache.get(&model_id, &text).expect("embedded above").clone();
            IndexedItem {
                key,
                text,
                vector: EmbeddingVector {
                    values,
                    model_id: model_id.clone(),
                },
            }
        })
        .collect();
    Ok(Index { model_id, items })
}

/// Exact top-k by cosine; ties go to the smaller key. `owners` restricts the candidates.
pub fn query_vector(
    index: &Index,
    question: &EmbeddingVector,
    k: usize,
    owners: Option<&[String]>,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if question.model_id != index.model_id {
        return Err(RetrievalError::ModelMismatch {
            query: question.model_id.clone(),
            index: index.model_id.clone(),
        });
    }
    let mut scored: Vec<(f64, &IndexedItem)> = index
        .items
        .iter()
        .filter(|i| owners.is_none_or(|o| o.contains(&i.key.owner)))
        .map(|i| (cosine(&question.values, &i.vector.values), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.key.cmp(&b.1.key)));
    scored.truncate(k);
    Ok(RetrievalResult {
        items: scored
            .into_iter()
            .map(|(score, item)| ScoredItem {
                item: item.clone(),
                score,
            })
            .collect(),
        k_requested: k,
    })
}

pub fn query(
    gateway: &Gateway,
    index: &Index,
    question: &str,
    k: usize,
    owners: Option<&[String]>,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let v = gateway.embed_one(question)?;
    query_vector(index, &v, k, owners)
}

/// Raw turns, each prefixed with its session timestamp. Owned by the speaker.
pub fn utterance_items(sessions: &[Session]) -> Vec<(ItemKey, String)> {
    sessions
        .iter()
        .flat_map(|s| {
            s.turns.iter().map(move |t| {
                (
                    ItemKey {
                        owner: t.speaker.clone(),
                        item: ItemRef::Utterance {
                            session: s.session_id.clone(),
                            position: t.position,
                        },
                    },
                    format!("[{}] {}: {}", s.timestamp.raw(), t.speaker, t.text),
                )
            })
        })
        .collect()
}

/// Extracted observations without evolution, each prefixed with its session timestamp.
pub fn observation_items(observations: &[Observation]) -> Vec<(ItemKey, String)> {
    let mut ordinals: BTreeMap<(String, String), u32> = BTreeMap::new();
    observations
        .iter()
        .map(|o| {
            let n = ordinals
                .entry((o.subject.clone(), o.source_session.clone()))
                .or_insert(0);
            let key = ItemKey {
                owner: o.subject.clone(),
                item: ItemRef::Observation {
                    session: o.source_session.clone(),
                    ordinal: *n,
                },
            };
            *n += 1;
            (key, format!("[{}] {}", o.extracted_at.raw(), o.text))
        })
        .collect()
}

/// Current entries of evolved stores. Entry text already carries its dates.
pub fn entry_items(stores: &[MemoryStore]) -> Vec<(ItemKey, String)> {
    stores
        .iter()
        .flat_map(|s| {
            s.entries.values().map(|e| {
                (
                    ItemKey {
                        owner: s.owner.clone(),
                        item: ItemRef::Entry { index: e.index },
                    },
                    e.text.clone(),
                )
            })
        })
        .collect()
}
