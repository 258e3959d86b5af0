//! Pulls a JSON record out of free-form model output.
//!
//! Candidates are tried in order: the whole text, the first fenced code
//! block, then the first balanced `{...}` span. If none parses, the same
//! sequence is retried after repairing trailing commas and smart quotes.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no structured candidate found in model output")]
    NoStructureFound,
    #[error("structured candidates found but none parsed: {0}")]
    ParseFailed(String),
}

pub fn extract_structured(text: &str) -> Result<Value, ExtractError> {
    let mut last_error = None;
    let mut any_candidate = false;

    for repaired in [false, true] {
        let source = if repaired {
            let fixed = normalize_quotes(text);
            if !any_candidate && candidates(&fixed).is_empty() {
                break;
            }
            fixed
        } else {
            text.to_owned()
        };
        for candidate in candidates(&source) {
            any_candidate = true;
            let body = if repaired {
                strip_trailing_commas(&candidate)
            } else {
                candidate
            };
            match serde_json::from_str::<Value>(&body) {
                Ok(v) if v.is_object() || v.is_array() => return Ok(v),
                Ok(_) => {}
                Err(e) => last_error = Some(e.to_string()),
            }
        }
    }

    if any_candidate {
        Err(ExtractError::ParseFailed(
            last_error.unwrap_or_else(|| "candidate is not a record".into()),
        ))
    } else {
        Err(ExtractError::NoStructureFound)
    }
}

fn candidates(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let trimmed = text.trim();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        out.push(trimmed.to_owned());
    }
    if let Some(block) = first_fenced_block(text) {
        let block = block.trim();
        if !block.is_empty() {
            out.push(block.to_owned());
        }
    }
    if let Some(span) = first_balanced_object(text) {
        out.push(span.to_owned());
    }
    out.dedup();
    out
}

/// Contents of the first ``` fence, skipping an optional language tag on the
/// opening line. An unterminated fence runs to the end of the text.
fn first_fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') => {
            nl + 1
        }
        _ => 0,
    };
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

/// The substring from the first `{` to its matching `}`, skipping braces
/// inside string literals. Returns `None` if the brace never closes.
fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (off, c) in text[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + off + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn normalize_quotes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' => '"',
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' => '\'',
            other => other,
        })
        .collect()
}

/// Removes commas that directly precede `}` or `]` (ignoring whitespace),
/// leaving string contents untouched.
fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}
