//! Extraction and validation of an agent's structured answer: an optional
//! M/Y token, a short rationale and a fenced code block holding the
//! normalized acceleration array.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentResponse, Plan, TacticalToken};
use crate::prompting::OutputSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFailure {
    NoCodeBlock,
    WrongLength,
    OutOfRange,
    NonNumeric,
    MissingToken,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseFailure::NoCodeBlock => "no-code-block",
            ParseFailure::WrongLength => "wrong-length",
            ParseFailure::OutOfRange => "out-of-range",
            ParseFailure::NonNumeric => "non-numeric",
            ParseFailure::MissingToken => "missing-token",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub raw_text: String,
    pub result: Result<AgentResponse, ParseFailure>,
}

impl ParseOutcome {
    pub fn is_valid(&self) -> bool {
        self.result.is_ok()
    }
}

const FENCE: &str = "```";

/// Byte range of the body of the last complete fenced block, plus the
/// offset of its opening fence.
fn last_code_block(text: &str) -> Option<(usize, &str)> {
    let fences: Vec<usize> = text.match_indices(FENCE).map(|(i, _)| i).collect();
    let pairs = fences.len() / 2;
    if pairs == 0 {
        return None;
    }
    let open = fences[2 * (pairs - 1)];
    let close = fences[2 * (pairs - 1) + 1];
    let mut body = &text[open + FENCE.len()..close];
    // Drop an info string such as "python" on the opening line.
    if let Some(nl) = body.find('\n') {
        let info = body[..nl].trim();
        if !info.is_empty() && info.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            body = &body[nl + 1..];
        }
    }
    Some((open, body))
}

fn strip_assignment(body: &str) -> &str {
    let trimmed = body.trim();
    if let Some(eq) = trimmed.find('=') {
        let name = trimmed[..eq].trim();
        let is_ident = !name.is_empty()
            && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if is_ident {
            return trimmed[eq + 1..].trim();
        }
    }
    trimmed
}

fn parse_array(body: &str) -> Result<Vec<f64>, ParseFailure> {
    let mut s = strip_assignment(body).trim_end_matches(';').trim();
    if let Some(inner) = s.strip_prefix('[') {
        s = inner.strip_suffix(']').ok_or(ParseFailure::NonNumeric)?;
    }
    if s.contains(['[', ']']) {
        return Err(ParseFailure::NonNumeric);
    }
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(ParseFailure::NonNumeric),
        })
        .collect()
}

/// First standalone `M` or `Y` in `text` and the byte offset just past it.
fn find_token(text: &str) -> Option<(TacticalToken, usize)> {
    let bytes = text.as_bytes();
    let boundary = |i: usize| i >= bytes.len() || !bytes[i].is_ascii_alphanumeric();
    for (i, &b) in bytes.iter().enumerate() {
        let token = match b {
            b'M' => TacticalToken::M,
            b'Y' => TacticalToken::Y,
            _ => continue,
        };
        let before_ok = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        if before_ok && boundary(i + 1) {
            return Some((token, i + 1));
        }
    }
    None
}

/// Parses raw model text against `schema`. Never panics.
pub fn parse_response(raw_text: &str, schema: &OutputSchema) -> ParseOutcome {
    ParseOutcome {
        raw_text: raw_text.to_string(),
        result: parse_inner(raw_text, schema),
    }
}

/// Byte-level entry point; invalid UTF-8 is replaced before parsing.
pub fn parse_response_bytes(raw: &[u8], schema: &OutputSchema) -> ParseOutcome {
    parse_response(&String::from_utf8_lossy(raw), schema)
}

fn parse_inner(text: &str, schema: &OutputSchema) -> Result<AgentResponse, ParseFailure> {
    let (open, body) = last_code_block(text).ok_or(ParseFailure::NoCodeBlock)?;
    let values = parse_array(body)?;
    if values.len() != schema.plan_len {
        return Err(ParseFailure::WrongLength);
    }
    if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(ParseFailure::OutOfRange);
    }
    let plan = Plan::new(values).map_err(|_| ParseFailure::OutOfRange)?;
    let preamble = &text[..open];
    let (tactical_token, rationale) = if schema.requires_token {
        let (token, end) = find_token(preamble).ok_or(ParseFailure::MissingToken)?;
        (Some(token), preamble[end..].trim())
    } else {
        (None, preamble.trim())
    };
    Ok(AgentResponse {
        tactical_token,
        rationale: rationale.to_string(),
        plan,
    })
}

/// Canonical text form of a response, as requested by the output schema.
pub fn render_response(response: &AgentResponse) -> String {
    let mut out = String::new();
    if let Some(t) = response.tactical_token {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    if !response.rationale.is_empty() {
        out.push_str(&response.rationale);
        out.push('\n');
    }
    let values: Vec<String> = response.plan.values().iter().map(|v| v.to_string()).collect();
    out.push_str("```python\n[");
    out.push_str(&values.join(", "));
    out.push_str("]\n```\n");
    out
}

/// Plan to execute when the current answer is unusable.
#[derive(Debug, Clone, PartialEq)]
pub struct Fallback {
    pub plan: Plan,
    /// True when no valid plan existed and the vehicle coasts.
    pub flagged: bool,
}

/// Continues the most recent valid plan from its cursor, padded with its
/// final element; coasts with an all-zero plan when none exists.
pub fn fallback_plan(last_valid: Option<&Plan>, plan_len: usize) -> Fallback {
    match last_valid {
        Some(plan) => Fallback {
            plan: plan.shifted(),
            flagged: false,
        },
        None => Fallback {
            plan: Plan::zeros(plan_len),
            flagged: true,
        },
    }
}
