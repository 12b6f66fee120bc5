//! The language-model agent ℒ: prompt rendering from the belief state,
//! pluggable generation backends, and the line-oriented directive protocol
//! its replies must follow.

mod backend;
mod prompt;
mod verbalize;

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::types::{FeatureValue, SchemaError};

pub use backend::{Backend, BackendConfig, Pattern, RemoteConfig, ScriptRule, ScriptedConfig};
pub use prompt::{builtin_templates, render_prompt, PromptContext, PromptTemplate, Slot, SlotSpec};
pub use verbalize::{polish_verbalization, verbalize_sentences, verbalize_verdict};

/// Identifier of the only response grammar this build understands.
pub const DIRECTIVE_GRAMMAR: &str = "directive/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("prompt slot `{0}` cannot be resolved from the belief state")]
    MissingSlot(String),
    #[error("backend timed out")]
    BackendTimeout,
    #[error("backend HTTP error{}: {message}", status.map(|s| format!(" {s}")).unwrap_or_default())]
    BackendHttpError { status: Option<u16>, message: String },
    #[error("no scripted rule matched and no default is declared")]
    NoRuleMatched,
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("verdict does not fit the schema: {0}")]
    SchemaMismatch(String),
}

impl LlmError {
    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::MissingSlot(_) => "missing_slot",
            LlmError::BackendTimeout => "backend_timeout",
            LlmError::BackendHttpError { .. } => "backend_http_error",
            LlmError::NoRuleMatched => "no_rule_matched",
            LlmError::InvalidConfig(_) => "invalid_config",
            LlmError::SchemaMismatch(_) => "schema_mismatch",
        }
    }
}

impl From<SchemaError> for LlmError {
    fn from(e: SchemaError) -> Self {
        LlmError::SchemaMismatch(e.to_string())
    }
}

/// A structured move extracted from a model reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "move", rename_all = "snake_case")]
pub enum AgentMove {
    Answer {
        label: String,
        rationale: String,
    },
    ToolCall {
        tool_name: String,
        arguments: Value,
    },
    HypothesisCheck {
        assignment: BTreeMap<String, FeatureValue>,
        claimed_label: String,
    },
    Plan {
        steps: Vec<String>,
    },
}

impl AgentMove {
    pub fn summary(&self) -> String {
        match self {
            AgentMove::Answer { label, .. } => format!("answer {label}"),
            AgentMove::ToolCall { tool_name, .. } => format!("tool call {tool_name}"),
            AgentMove::HypothesisCheck { claimed_label, .. } => format!("hypothesis check claiming {claimed_label}"),
            AgentMove::Plan { steps } => format!("plan of {} steps", steps.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Malformed { reason: String },
}

impl ParseStatus {
    pub fn reason(&self) -> Option<&str> {
        match self {
            ParseStatus::Ok => None,
            ParseStatus::Malformed { reason } => Some(reason),
        }
    }
}

/// `y_llm`: the raw reply and what the parser made of it. `parsed` is present
/// exactly when `parse_status` is ok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralResponse {
    pub raw_text: String,
    pub parsed: Option<AgentMove>,
    pub parse_status: ParseStatus,
}

impl NeuralResponse {
    fn ok(raw_text: &str, m: AgentMove) -> Self {
        Self {
            raw_text: raw_text.to_string(),
            parsed: Some(m),
            parse_status: ParseStatus::Ok,
        }
    }

    pub fn malformed(raw_text: &str, reason: impl Into<String>) -> Self {
        Self {
            raw_text: raw_text.to_string(),
            parsed: None,
            parse_status: ParseStatus::Malformed { reason: reason.into() },
        }
    }
}

const DIRECTIVES: [&str; 4] = ["ANSWER:", "TOOL:", "CHECK:", "PLAN:"];

/// Parses a reply under `grammar_id`. Never fails: anything unparseable comes
/// back as a malformed response carrying the reason.
pub fn parse_move(raw_text: &str, grammar_id: &str) -> NeuralResponse {
    if grammar_id != DIRECTIVE_GRAMMAR {
        return NeuralResponse::malformed(raw_text, format!("unknown grammar `{grammar_id}`"));
    }
    let mut offset = 0;
    for line in raw_text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(d) = DIRECTIVES.iter().find(|d| trimmed.starts_with(**d)) {
            let body = trimmed[d.len()..].trim_end_matches(['\n', '\r']);
            let parsed = match *d {
                "ANSWER:" => parse_answer(body),
                "TOOL:" => parse_tool(body),
                "CHECK:" => parse_check(body),
                _ => {
                    // a plan may continue over the following lines
                    let rest = &raw_text[offset + (line.len() - trimmed.len()) + d.len()..];
                    parse_plan(rest)
                }
            };
            return match parsed {
                Ok(m) => NeuralResponse::ok(raw_text, m),
                Err(reason) => NeuralResponse::malformed(raw_text, reason),
            };
        }
        offset += line.len();
    }
    NeuralResponse::malformed(raw_text, "no directive")
}

/// Splits `body` at the first `|` into the head and the text after `key`.
fn split_keyed<'a>(body: &'a str, key: &str) -> Result<(&'a str, Option<&'a str>), String> {
    match body.split_once('|') {
        None => Ok((body.trim(), None)),
        Some((head, tail)) => {
            let tail = tail.trim_start();
            tail.strip_prefix(key)
                .map(|t| (head.trim(), Some(t.trim())))
                .ok_or_else(|| format!("expected `{key}` after `|`"))
        }
    }
}

fn parse_answer(body: &str) -> Result<AgentMove, String> {
    let (label, rationale) = split_keyed(body, "RATIONALE:")?;
    if label.is_empty() {
        return Err("empty answer label".into());
    }
    Ok(AgentMove::Answer {
        label: label.to_string(),
        rationale: rationale.unwrap_or_default().to_string(),
    })
}

fn parse_tool(body: &str) -> Result<AgentMove, String> {
    let (name, args) = split_keyed(body, "ARGS:")?;
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err("tool name must be a single non-empty word".into());
    }
    let args = args.ok_or("missing ARGS")?;
    let arguments: Value = serde_json::from_str(args).map_err(|e| format!("ARGS is not JSON: {e}"))?;
    if !arguments.is_object() {
        return Err("ARGS must be a JSON object".into());
    }
    Ok(AgentMove::ToolCall {
        tool_name: name.to_string(),
        arguments,
    })
}

fn parse_check(body: &str) -> Result<AgentMove, String> {
    // the assignment is JSON and may itself contain `|`, so split at the last one
    let (json, claim) = body.rsplit_once('|').ok_or("missing CLAIM")?;
    let claim = claim.trim_start().strip_prefix("CLAIM:").ok_or("expected `CLAIM:` after `|`")?.trim();
    if claim.is_empty() {
        return Err("empty claimed label".into());
    }
    let assignment: BTreeMap<String, FeatureValue> =
        serde_json::from_str(json.trim()).map_err(|e| format!("CHECK is not a JSON object of feature values: {e}"))?;
    Ok(AgentMove::HypothesisCheck {
        assignment,
        claimed_label: claim.to_string(),
    })
}

fn plan_marker() -> &'static Regex {
    static MARKER: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    MARKER.get_or_init(|| Regex::new(r"(?:^|\s)(\d+)\.\s").expect("static regex"))
}

fn parse_plan(body: &str) -> Result<AgentMove, String> {
    let marks: Vec<_> = plan_marker().captures_iter(body).collect();
    if marks.is_empty() {
        return Err("plan has no numbered steps".into());
    }
    if !body[..marks[0].get(0).expect("whole match").start()].trim().is_empty() {
        return Err("plan must start with step 1".into());
    }
    let mut steps = Vec::with_capacity(marks.len());
    for (i, m) in marks.iter().enumerate() {
        if m[1].parse::<usize>().ok() != Some(i + 1) {
            return Err(format!("plan step {} is numbered {}", i + 1, &m[1]));
        }
        let start = m.get(0).expect("whole match").end();
        let end = marks.get(i + 1).map_or(body.len(), |n| n.get(0).expect("whole match").start());
        let step = body[start..end].trim();
        if step.is_empty() {
            return Err(format!("plan step {} is empty", i + 1));
        }
        steps.push(step.to_string());
    }
    Ok(AgentMove::Plan { steps })
}

/// Emits `m` in the directive grammar; the inverse of [`parse_move`].
pub fn format_move(m: &AgentMove) -> String {
    match m {
        AgentMove::Answer { label, rationale } if rationale.is_empty() => format!("ANSWER: {label}"),
        AgentMove::Answer { label, rationale } => format!("ANSWER: {label} | RATIONALE: {rationale}"),
        AgentMove::ToolCall { tool_name, arguments } => format!("TOOL: {tool_name} | ARGS: {arguments}"),
        AgentMove::HypothesisCheck {
            assignment,
            claimed_label,
        } => format!(
            "CHECK: {} | CLAIM: {claimed_label}",
            serde_json::to_string(assignment).expect("feature values serialize")
        ),
        AgentMove::Plan { steps } => {
            let numbered: Vec<String> = steps.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect();
            format!("PLAN: {}", numbered.join(" "))
        }
    }
}

/// The response-format section appended to prompts that declare the grammar.
pub fn grammar_instructions(grammar_id: &str) -> Option<&'static str> {
    (grammar_id == DIRECTIVE_GRAMMAR).then_some(
        "Reply with exactly one line in one of these forms:\n\
         ANSWER: <label> | RATIONALE: <why>\n\
         TOOL: <tool name> | ARGS: <JSON object>\n\
         CHECK: <JSON object of feature values> | CLAIM: <label>\n\
         PLAN: 1. <step> 2. <step>",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn parse(s: &str) -> NeuralResponse {
        parse_move(s, DIRECTIVE_GRAMMAR)
    }

    #[test]
    fn answer_with_rationale() {
        assert_eq!(
            parse("ANSWER: sepsis | RATIONALE: criteria met").parsed,
            Some(AgentMove::Answer {
                label: "sepsis".into(),
                rationale: "criteria met".into()
            })
        );
    }

    #[test]
    fn tool_call_with_json_args() {
        assert_eq!(
            parse(r#"TOOL: calculator | ARGS: {"expr":"2+3*4"}"#).parsed,
            Some(AgentMove::ToolCall {
                tool_name: "calculator".into(),
                arguments: json!({"expr": "2+3*4"})
            })
        );
    }

    #[test]
    fn prose_is_malformed() {
        let r = parse("I think maybe sepsis?");
        assert_eq!(r.parsed, None);
        assert_eq!(r.parse_status.reason(), Some("no directive"));
    }

    #[test]
    fn first_directive_wins_after_preamble_lines() {
        let r = parse("Let me think.\n  CHECK: {\"hr\": 90, \"fever\": true} | CLAIM: sepsis\nANSWER: no");
        assert_eq!(
            r.parsed,
            Some(AgentMove::HypothesisCheck {
                assignment: BTreeMap::from([
                    ("fever".to_string(), FeatureValue::Boolean(true)),
                    ("hr".to_string(), FeatureValue::Numeric(90.0)),
                ]),
                claimed_label: "sepsis".into()
            })
        );
    }

    #[test]
    fn plans_span_lines() {
        let r = parse("PLAN: 1. add the apples\n2. multiply by 3\n3. answer");
        assert_eq!(
            r.parsed,
            Some(AgentMove::Plan {
                steps: vec!["add the apples".into(), "multiply by 3".into(), "answer".into()]
            })
        );
        assert!(parse("PLAN: 2. skip").parsed.is_none());
        assert!(parse("PLAN: nothing numbered").parsed.is_none());
    }

    #[test]
    fn broken_directives_carry_reasons() {
        for bad in [
            "ANSWER:   ",
            "ANSWER: A | WHY: x",
            "TOOL: calculator",
            "TOOL: calculator | ARGS: [1]",
            "TOOL: calculator | ARGS: {",
            "CHECK: {\"a\": 1}",
            "CHECK: [1] | CLAIM: A",
        ] {
            let r = parse(bad);
            assert!(r.parsed.is_none(), "{bad}");
            assert!(r.parse_status.reason().is_some());
        }
        assert!(parse_move("ANSWER: A", "json/1").parsed.is_none());
    }

    #[test]
    fn format_round_trips() {
        let moves = [
            AgentMove::Answer {
                label: "A".into(),
                rationale: String::new(),
            },
            AgentMove::Answer {
                label: "B".into(),
                rationale: "tree says so".into(),
            },
            AgentMove::ToolCall {
                tool_name: "kb".into(),
                arguments: json!({"key": "a|b"}),
            },
            AgentMove::HypothesisCheck {
                assignment: BTreeMap::from([("c".to_string(), FeatureValue::Categorical("x|y".into()))]),
                claimed_label: "A".into(),
            },
            AgentMove::Plan {
                steps: vec!["one".into(), "two".into()],
            },
        ];
        for m in moves {
            assert_eq!(parse(&format_move(&m)).parsed, Some(m));
        }
    }
}
