//! A rule-based chat backend that understands the built-in prompts.
//!
//! It lets every pipeline stage run offline and deterministically: extraction
//! turns the target speaker's turns into observations, the memory manager
//! grounds relative dates with the temporal resolver and merges overlapping
//! entries, QA generation writes cloze questions, and the teacher and answer
//! prompts are served by word-overlap lookup. Replies are crude by design;
//! they exist to exercise plumbing, not to score well.

use std::collections::HashSet;

use once_cell::sync::Lazy;
use regex::Regex;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, ChatResponse, Result, TokenLogprob, Usage};
use crate::domain::Timestamp;
use crate::temporal::{find_relative_phrase, render_date};

const RULE: &str = "-------------------------";
const MAX_OBSERVATIONS: usize = 8;
const CONCISE_WORDS: usize = 12;
/// Word-overlap (Jaccard) above which an observation revises an entry.
const MERGE_OVERLAP: f64 = 0.4;

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedChat;

impl ChatBackend for ScriptedChat {
    fn id(&self) -> String {
        "scripted-v1".into()
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let text = reply(req);
        Ok(respond(&text, req))
    }
}

fn reply(req: &ChatRequest) -> String {
    let user = req.user.as_str();
    if user.contains("You are a Memory Manager") {
        evolution(user)
    } else if user.contains("extract the major OBSERVATIONS for") {
        extraction(user)
    } else if user.contains("question-answer pairs about") {
        qa_generation(user)
    } else if user.starts_with("Conversation history:") {
        teacher(user)
    } else if user.starts_with("Retrieved memories:") {
        answer(user, req.system.contains("concisely"))
    } else {
        "I do not know.".into()
    }
}

/// Splits on whitespace, keeping the leading space on every token but the first.
fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| if i == 0 { w.to_string() } else { format!(" {w}") })
        .collect()
}

fn respond(text: &str, req: &ChatRequest) -> ChatResponse {
    let pieces = tokenize(text);
    let logprob = |tok: &str| {
        let h = Sha256::digest(tok.as_bytes());
        -0.01 - f64::from(h[0] % 50) / 100.0
    };
    let tokens: Vec<TokenLogprob> = pieces
        .iter()
        .map(|t| TokenLogprob::new(t.clone(), logprob(t)))
        .collect();
    let top_alternatives = req.logprob_top.map(|top| {
        tokens
            .iter()
            .map(|t| {
                (0..top as usize)
                    .map(|j| {
                        if j == 0 {
                            t.clone()
                        } else {
                            TokenLogprob::new(
                                format!("{}~{j}", t.token),
                                t.logprob - 0.5 - 0.7 * j as f64,
                            )
                        }
                    })
                    .collect()
            })
            .collect()
    });
    ChatResponse {
        text: text.to_string(),
        tokens,
        top_alternatives,
        usage: Usage {
            prompt_tokens: req.user.split_whitespace().count() as u64,
            completion_tokens: pieces.len() as u64,
        },
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(&rest[..rest.find(end).unwrap_or(rest.len())])
}

fn conversation_block(prompt: &str) -> &str {
    let Some(first) = prompt.find(RULE) else {
        return "";
    };
    let rest = &prompt[first + RULE.len()..];
    rest[..rest.find(RULE).unwrap_or(rest.len())].trim()
}

fn turns_of<'a>(conversation: &'a str, speaker: &str) -> Vec<&'a str> {
    let prefix = format!("{speaker}: ");
    conversation
        .lines()
        .filter_map(|l| l.strip_prefix(prefix.as_str()))
        .map(str::trim)
        .collect()
}

fn content_words(text: &str) -> HashSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() >= 4)
        .map(String::from)
        .collect()
}

fn overlap(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn extraction(prompt: &str) -> String {
    static TARGET: Lazy<Regex> =
        Lazy::new(|| Regex::new(r"extract the major OBSERVATIONS for (.+?)\.\n").unwrap());
    let Some(target) = TARGET.captures(prompt).map(|c| c[1].to_string()) else {
        return "{\"OBSERVATIONS\": []}\n#END".into();
    };
    let observations: Vec<String> = turns_of(conversation_block(prompt), &target)
        .into_iter()
        .filter(|t| t.split_whitespace().count() >= 4)
        .take(MAX_OBSERVATIONS)
        .map(|t| format!("{target} said: {t}"))
        .collect();
    format!("{}\n#END", json!({ "OBSERVATIONS": observations }))
}

static NEGATION: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)\b(no longer|not|never|stopped|quit|anymore|instead|but)\b").unwrap()
});

fn evolution(prompt: &str) -> String {
    static STORE_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\[(\d+)\] (.*)$").unwrap());
    static OBS_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\d+\. (.*)$").unwrap());
    static DATE: Lazy<Regex> =
        Lazy::new(|| Regex::new(r"\[session date : (.+?) \(context: today\)\]").unwrap());

    let store: Vec<(u64, String)> = between(prompt, "CURRENT MEMORY STORE for ", "\n\nNEW OBSERVATIONS")
        .map(|block| {
            block
                .lines()
                .skip(1)
                .filter_map(|l| {
                    let c = STORE_LINE.captures(l)?;
                    Some((c[1].parse().ok()?, c[2].to_string()))
                })
                .collect()
        })
        .unwrap_or_default();
    let observations: Vec<String> = between(prompt, "(context: today)]:\n", "\n\nRULES FOR")
        .map(|block| {
            block
                .lines()
                .filter_map(|l| OBS_LINE.captures(l).map(|c| c[1].to_string()))
                .collect()
        })
        .unwrap_or_default();
    let session_date = DATE
        .captures(prompt)
        .and_then(|c| Timestamp::parse(&c[1]).ok())
        .map(|t| t.date());

    let decisions: Vec<serde_json::Value> = observations
        .iter()
        .map(|obs| {
            let grounded = match session_date {
                Some(date) => match find_relative_phrase(obs, date) {
                    Some(r) => format!("On {} (context: {}), {obs}", r.rendering, r.source_phrase),
                    None => format!("As of {}, {obs}", render_date(date)),
                },
                None => obs.clone(),
            };
            if store.iter().any(|(_, text)| text.contains(obs.as_str())) {
                return json!({"original_obs": obs, "action": "IGNORE", "index": null, "refined_observation": null});
            }
            let words = content_words(obs);
            let best = store
                .iter()
                .map(|(i, text)| (overlap(&words, &content_words(text)), *i, text))
                .filter(|(score, _, _)| *score >= MERGE_OVERLAP)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            match best {
                Some((_, index, text)) => {
                    let action = if NEGATION.is_match(obs) { "RECONCILE" } else { "UPDATE" };
                    json!({"original_obs": obs, "action": action, "index": index, "refined_observation": format!("{text} {grounded}")})
                }
                None => json!({"original_obs": obs, "action": "ADD", "index": null, "refined_observation": grounded}),
            }
        })
        .collect();
    format!("{}\n#END", serde_json::to_string_pretty(&decisions).expect("values serialize"))
}

fn strip_word(w: &str) -> &str {
    w.trim_matches(|c: char| !c.is_alphanumeric())
}

fn qa_generation(prompt: &str) -> String {
    static HEADER: Lazy<Regex> = Lazy::new(|| {
        Regex::new(r"Write up to (\d+) question-answer pairs about (.+?) grounded").unwrap()
    });
    let Some(caps) = HEADER.captures(prompt) else {
        return "[]\n#END".into();
    };
    let count: usize = caps[1].parse().unwrap_or(0);
    let target = caps[2].to_string();
    let pairs: Vec<serde_json::Value> = turns_of(conversation_block(prompt), &target)
        .into_iter()
        .filter_map(|turn| {
            let words: Vec<&str> = turn.split_whitespace().collect();
            if words.len() < 5 {
                return None;
            }
            let answer = strip_word(words[words.len() - 1]);
            if answer.is_empty() {
                return None;
            }
            let prefix = words[..words.len() - 1].join(" ");
            Some(json!({
                "question": format!("Complete what {target} said: \"{prefix} ...\""),
                "answer": answer,
            }))
        })
        .take(count)
        .collect();
    format!("{}\n#END", json!(pairs))
}

fn best_line<'a>(lines: impl Iterator<Item = &'a str>, question: &str) -> Option<&'a str> {
    let q = content_words(question);
    let mut best: Option<(f64, &str)> = None;
    for line in lines {
        let score = overlap(&q, &content_words(line));
        if score > 0.0 && best.is_none_or(|(b, _)| score > b) {
            best = Some((score, line));
        }
    }
    best.map(|(_, l)| l)
}

fn teacher(prompt: &str) -> String {
    static CLOZE: Lazy<Regex> = Lazy::new(|| Regex::new(r#"said: "(.+) \.\.\."$"#).unwrap());
    let history = between(prompt, "Conversation history:\n", "\n\nQuestion: ").unwrap_or("");
    let question = between(prompt, "\n\nQuestion: ", "\nAnswer:").unwrap_or("").trim();
    if let Some(c) = CLOZE.captures(question) {
        let prefix = &c[1];
        for line in history.lines() {
            if let Some(pos) = line.find(prefix) {
                if let Some(next) = line[pos + prefix.len()..].split_whitespace().next() {
                    return strip_word(next).to_string();
                }
            }
        }
    }
    match best_line(history.lines(), question) {
        Some(line) => line
            .split_once(": ")
            .map(|(_, t)| t)
            .unwrap_or(line)
            .split_whitespace()
            .take(20)
            .collect::<Vec<_>>()
            .join(" "),
        None => "I do not know.".into(),
    }
}

fn answer(prompt: &str, concise: bool) -> String {
    static MEMORY: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\d+\. (.*)$").unwrap());
    static TS_PREFIX: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\[[^\]]*\] ").unwrap());
    static DATE: Lazy<Regex> =
        Lazy::new(|| Regex::new(r"\b(\d{1,2} [A-Z][a-z]+,? \d{4})\b").unwrap());
    let memories = between(prompt, "Retrieved memories:\n", "\n\nQuestion: ").unwrap_or("");
    let question = between(prompt, "\n\nQuestion: ", "\nAnswer:").unwrap_or("").trim();
    let lines: Vec<&str> = memories
        .lines()
        .filter_map(|l| MEMORY.captures(l).and_then(|c| c.get(1)).map(|m| m.as_str()))
        .collect();
    let Some(best) = best_line(lines.iter().copied(), question).or(lines.first().copied()) else {
        return "I do not know.".into();
    };
    if question.to_lowercase().starts_with("when") {
        if let Some(d) = DATE.captures(best) {
            return d[1].to_string();
        }
    }
    let text = TS_PREFIX.replace(best, "").to_string();
    if concise {
        text.split_whitespace()
            .take(CONCISE_WORDS)
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        text
    }
}
