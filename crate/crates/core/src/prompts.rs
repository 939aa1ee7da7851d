//! Versioned prompt assets with `{slot}` placeholders.
//!
//! Literal braces are written `{{` and `}}`. Built-in assets are compiled in;
//! a directory of same-named `.txt` files can override any of them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template}: no value for slot {{{slot}}}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: unbalanced brace at byte {at}")]
    Unbalanced { template: String, at: usize },
    #[error("reading prompt asset {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        PromptTemplate {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let _ = self.walk(|piece| {
            if let Piece::Slot(name) = piece {
                if !out.iter().any(|s| s == name) {
                    out.push(name.to_string());
                }
            }
            Ok(())
        });
        out
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len());
        self.walk(|piece| {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::MissingSlot {
                            template: self.name.clone(),
                            slot: name.to_string(),
                        })?;
                    out.push_str(value);
                }
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn walk<'a>(
        &'a self,
        mut visit: impl FnMut(Piece<'a>) -> Result<(), PromptError>,
    ) -> Result<(), PromptError> {
        let text = self.text.as_str();
        let bytes = text.as_bytes();
        let mut i = 0;
        let mut lit_start = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    visit(Piece::Literal(&text[lit_start..i]))?;
                    visit(Piece::Literal("{"))?;
                    i += 2;
                    lit_start = i;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    visit(Piece::Literal(&text[lit_start..i]))?;
                    visit(Piece::Literal("}"))?;
                    i += 2;
                    lit_start = i;
                }
                b'{' => {
                    let close = text[i + 1..].find('}').map(|j| i + 1 + j).ok_or(
                        PromptError::Unbalanced {
                            template: self.name.clone(),
                            at: i,
                        },
                    )?;
                    let name = &text[i + 1..close];
                    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                        return Err(PromptError::Unbalanced {
                            template: self.name.clone(),
                            at: i,
                        });
                    }
                    visit(Piece::Literal(&text[lit_start..i]))?;
                    visit(Piece::Slot(name))?;
                    i = close + 1;
                    lit_start = i;
                }
                b'}' => {
                    return Err(PromptError::Unbalanced {
                        template: self.name.clone(),
                        at: i,
                    })
                }
                _ => i += 1,
            }
        }
        visit(Piece::Literal(&text[lit_start..]))
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

pub const EXTRACTION: &str = "extraction.v1";
pub const EVOLUTION: &str = "evolution.v1";
pub const EVOLUTION_REPAIR: &str = "evolution_repair.v1";
pub const QA_GENERATION: &str = "qa_generation.v1";
pub const TEACHER_SYSTEM: &str = "teacher_system.v1";
pub const TEACHER_USER: &str = "teacher_user.v1";
pub const ANSWER_SYSTEM: &str = "answer_system.v1";
pub const ANSWER_CONCISE: &str = "answer_concise.v1";
pub const ANSWER_USER: &str = "answer_user.v1";

const BUILTIN: [(&str, &str); 9] = [
    (EXTRACTION, include_str!("../assets/prompts/extraction.v1.txt")),
    (EVOLUTION, include_str!("../assets/prompts/evolution.v1.txt")),
    (
        EVOLUTION_REPAIR,
        include_str!("../assets/prompts/evolution_repair.v1.txt"),
    ),
    (QA_GENERATION, include_str!("../assets/prompts/qa_generation.v1.txt")),
    (TEACHER_SYSTEM, include_str!("../assets/prompts/teacher_system.v1.txt")),
    (TEACHER_USER, include_str!("../assets/prompts/teacher_user.v1.txt")),
    (ANSWER_SYSTEM, include_str!("../assets/prompts/answer_system.v1.txt")),
    (ANSWER_CONCISE, include_str!("../assets/prompts/answer_concise.v1.txt")),
    (ANSWER_USER, include_str!("../assets/prompts/answer_user.v1.txt")),
];

/// The full set of templates used by the pipeline.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, text)| {
                // Asset files end with a newline that is not part of the prompt.
                let text = text.strip_suffix('\n').unwrap_or(text);
                (name.to_string(), PromptTemplate::new(*name, text))
            })
            .collect();
        PromptSet { templates }
    }

    /// Built-ins overridden by any `<name>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for name in BUILTIN.iter().map(|(n, _)| *n) {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let text = text.strip_suffix('\n').unwrap_or(&text).to_string();
            set.templates
                .insert(name.to_string(), PromptTemplate::new(name, text));
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &PromptTemplate {
        self.templates
            .get(name)
            .unwrap_or_else(|| panic!("unknown prompt asset {name}"))
    }

    /// Asset name to content hash, for run manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(k, t)| (k.clone(), t.sha256()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_slots_and_escaped_braces() {
        let t = PromptTemplate::new("t", "Hi {name}, here is {{json}} and {name} again.");
        assert_eq!(
            t.render(&[("name", "Ann")]).unwrap(),
            "Hi Ann, here is {json} and Ann again."
        );
        assert_eq!(t.slots(), vec!["name".to_string()]);
    }

    #[test]
    fn missing_slot_is_an_error() {
        let t = PromptTemplate::new("t", "{a} {b}");
        assert_eq!(
            t.render(&[("a", "x")]),
            Err(PromptError::MissingSlot {
                template: "t".into(),
                slot: "b".into()
            })
        );
    }

    #[test]
    fn stray_brace_is_an_error() {
        let t = PromptTemplate::new("t", "oops } here");
        assert!(matches!(t.render(&[]), Err(PromptError::Unbalanced { .. })));
    }

    #[test]
    fn builtin_assets_have_expected_slots() {
        let set = PromptSet::builtin();
        assert_eq!(
            set.get(EXTRACTION).slots(),
            vec!["speaker_a", "speaker_b", "speaker_target", "time", "conversation"]
        );
        assert_eq!(
            set.get(EVOLUTION).slots(),
            vec!["speaker", "current_memory", "timestamp", "new_obs_list"]
        );
        // Every built-in must render once its slots are filled.
        for (name, _) in BUILTIN {
            let t = set.get(name);
            let slots = t.slots();
            let values: Vec<(&str, &str)> = slots.iter().map(|s| (s.as_str(), "x")).collect();
            t.render(&values).unwrap();
        }
    }

    #[test]
    fn overrides_replace_builtins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("answer_concise.v1.txt"), "Be brief.\n").unwrap();
        let set = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.get(ANSWER_CONCISE).text, "Be brief.");
        assert_ne!(set.hashes(), PromptSet::builtin().hashes());
    }
}
