//! Recovery of JSON payloads from model output.
//!
//! Small models wrap JSON in preamble text, code fences, or a trailing
//! `#END` sentinel. These helpers peel that away before parsing.

use serde_json::Value;

pub const END_SENTINEL: &str = "#END";

/// Removes a trailing `#END` sentinel. Returns the remaining text and whether one was found.
pub fn strip_end_sentinel(raw: &str) -> (&str, bool) {
    let trimmed = raw.trim_end();
    match trimmed.strip_suffix(END_SENTINEL) {
        Some(rest) => (rest.trim_end(), true),
        None => (trimmed, false),
    }
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// First balanced `open ... close` block, skipping brackets inside JSON strings.
pub fn first_balanced_block(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            c if c == open => depth += 1,
            c if c == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + c.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub value: Value,
    pub had_sentinel: bool,
    /// True when the value was cut out of surrounding non-JSON text.
    pub recovered: bool,
}

/// Parses `raw` as JSON, falling back to the first balanced block delimited by `open`/`close`.
pub fn parse_lenient(raw: &str, open: char, close: char) -> Result<Recovered, String> {
    let (body, had_sentinel) = strip_end_sentinel(raw);
    let body = strip_code_fence(body);
    match serde_json::from_str::<Value>(body) {
        Ok(value) => Ok(Recovered {
            value,
            had_sentinel,
            recovered: false,
        }),
        Err(strict_err) => {
            let block = first_balanced_block(body, open, close)
                .ok_or_else(|| format!("no JSON found: {strict_err}"))?;
            let value = serde_json::from_str::<Value>(block)
                .or_else(|_| serde_json::from_str::<Value>(&block.replace("\\'", "'")))
                .map_err(|e| format!("invalid JSON: {e}"))?;
            Ok(Recovered {
                value,
                had_sentinel,
                recovered: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentinel_is_stripped() {
        assert_eq!(strip_end_sentinel("{} #END\n"), ("{}", true));
        assert_eq!(strip_end_sentinel("{}"), ("{}", false));
    }

    #[test]
    fn balanced_block_ignores_brackets_in_strings() {
        let t = r#"Sure! {"a": "x } y", "b": {"c": 1}} trailing"#;
        assert_eq!(
            first_balanced_block(t, '{', '}'),
            Some(r#"{"a": "x } y", "b": {"c": 1}}"#)
        );
        assert_eq!(first_balanced_block("[1, [2]", '[', ']'), None);
    }

    #[test]
    fn lenient_parse_paths() {
        let r = parse_lenient("```json\n[1, 2]\n```\n#END", '[', ']').unwrap();
        assert_eq!(r.value, serde_json::json!([1, 2]));
        assert!(r.had_sentinel && !r.recovered);

        let r = parse_lenient("Here you go: [\"a\"] hope it helps", '[', ']').unwrap();
        assert!(r.recovered);

        assert!(parse_lenient("no json here", '{', '}').is_err());
    }
}
