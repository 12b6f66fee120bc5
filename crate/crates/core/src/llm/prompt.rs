use serde::{Deserialize, Serialize};

use crate::belief::BeliefState;
use crate::tree::{Branch, SymbolicVerdict};
use crate::types::{canonical_json, digest, Schema};

use super::{grammar_instructions, LlmError, DIRECTIVE_GRAMMAR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    InputSummary,
    BeliefDigest,
    TreeVerdict,
    ToolResults,
    TaskInstruction,
    /// Names and descriptions of the registered tools.
    ToolRoster,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::InputSummary => "input_summary",
            Slot::BeliefDigest => "belief_digest",
            Slot::TreeVerdict => "tree_verdict",
            Slot::ToolResults => "tool_results",
            Slot::TaskInstruction => "task_instruction",
            Slot::ToolRoster => "tool_roster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub slot: Slot,
    /// Optional slots render as `(none)` instead of failing when absent.
    #[serde(default)]
    pub optional: bool,
}

impl SlotSpec {
    pub fn required(slot: Slot) -> Self {
        Self { slot, optional: false }
    }

    pub fn optional(slot: Slot) -> Self {
        Self { slot, optional: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub role_preamble: String,
    #[serde(default)]
    pub slots: Vec<SlotSpec>,
    #[serde(default)]
    pub response_grammar_id: Option<String>,
}

/// What a prompt may draw on besides the belief state itself.
#[derive(Debug, Clone, Default)]
pub struct PromptContext {
    pub schema: Option<Schema>,
    pub tool_roster: Vec<(String, String)>,
    pub task_instruction: Option<String>,
}

/// Templates shipped with the engine, keyed by id.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    let grammar = Some(DIRECTIVE_GRAMMAR.to_string());
    vec![
        PromptTemplate {
            id: "default".into(),
            role_preamble: "You are the abductive reasoner in a hybrid system. A decision tree is available \
                            as a symbolic oracle and tools can be called on request. Use them when unsure."
                .into(),
            slots: vec![
                SlotSpec::required(Slot::InputSummary),
                SlotSpec::optional(Slot::TaskInstruction),
                SlotSpec::optional(Slot::ToolRoster),
                SlotSpec::optional(Slot::TreeVerdict),
                SlotSpec::optional(Slot::ToolResults),
                SlotSpec::required(Slot::BeliefDigest),
            ],
            response_grammar_id: grammar.clone(),
        },
        PromptTemplate {
            id: "explain_tree".into(),
            role_preamble: "Restate the decision tree's verdict below in plain words and state whether you agree."
                .into(),
            slots: vec![SlotSpec::required(Slot::InputSummary), SlotSpec::required(Slot::TreeVerdict)],
            response_grammar_id: grammar.clone(),
        },
        PromptTemplate {
            id: "decompose".into(),
            role_preamble: "Break the problem into numbered steps and use the calculator for every arithmetic step."
                .into(),
            slots: vec![
                SlotSpec::required(Slot::InputSummary),
                SlotSpec::optional(Slot::ToolRoster),
                SlotSpec::optional(Slot::ToolResults),
                SlotSpec::required(Slot::BeliefDigest),
            ],
            response_grammar_id: grammar,
        },
    ]
}

/// Trace lines in root-to-leaf order, one per step.
pub(crate) fn trace_lines(v: &SymbolicVerdict) -> Vec<String> {
    let mut out = vec![format!("outcome {} (confidence {:.2})", v.outcome, v.confidence)];
    let traces = v.traces();
    for (t, trace) in traces.iter().enumerate() {
        let prefix = if traces.len() > 1 { format!("tree {t} ") } else { String::new() };
        for (i, s) in trace.steps.iter().enumerate() {
            let dir = match s.branch {
                Branch::Left => "left",
                Branch::Right => "right",
            };
            out.push(format!("{prefix}step {}: {} (observed {}) -> {dir}", i + 1, s.rendered, s.observed));
        }
        out.push(format!("{prefix}leaf {}", trace.leaf_id));
    }
    out
}

fn slot_text(slot: Slot, belief: &BeliefState, ctx: &PromptContext) -> Option<String> {
    match slot {
        Slot::InputSummary => {
            let x = belief.input();
            let mut s = format!("source: {}\n", x.source_id);
            for (i, v) in x.features.iter().enumerate() {
                let name = ctx
                    .schema
                    .as_ref()
                    .and_then(|sc| sc.feature(i))
                    .map_or_else(|| format!("x{i}"), |f| f.name.clone());
                s.push_str(&format!("{name} = {v}\n"));
            }
            if let Some(t) = &x.text_abstraction {
                s.push_str(&format!("text: {t}\n"));
            }
            Some(s.trim_end().to_string())
        }
        Slot::BeliefDigest => {
            let mut lines: Vec<String> = belief
                .events()
                .iter()
                .zip(belief.provenance())
                .map(|(e, p)| format!("step {} [{}] {}: {}", p.step_index, p.actor, p.action.name(), e.summary()))
                .collect();
            if lines.is_empty() {
                lines.push("(no events yet)".into());
            }
            lines.push(format!("digest: {}", digest(canonical_json(belief).as_bytes())));
            Some(lines.join("\n"))
        }
        Slot::TreeVerdict => belief.latest_tree_verdict().map(|v| trace_lines(v).join("\n")),
        Slot::ToolResults => {
            let lines: Vec<String> = belief.tool_results().map(|t| t.summary()).collect();
            (!lines.is_empty()).then(|| lines.join("\n"))
        }
        Slot::TaskInstruction => ctx.task_instruction.clone(),
        Slot::ToolRoster => (!ctx.tool_roster.is_empty()).then(|| {
            ctx.tool_roster
                .iter()
                .map(|(n, d)| format!("- {n}: {d}"))
                .collect::<Vec<_>>()
                .join("\n")
        }),
    }
}

/// Renders `template` against `belief`. Deterministic: equal inputs give equal
/// strings. A template with no slots and no grammar renders as its preamble.
pub fn render_prompt(template: &PromptTemplate, belief: &BeliefState, ctx: &PromptContext) -> Result<String, LlmError> {
    let mut out = template.role_preamble.clone();
    for spec in &template.slots {
        let text = match slot_text(spec.slot, belief, ctx) {
            Some(t) => t,
            None if spec.optional => "(none)".into(),
            None => return Err(LlmError::MissingSlot(spec.slot.name().into())),
        };
        out.push_str(&format!("\n\n## {}\n{text}", spec.slot.name()));
    }
    if let Some(g) = &template.response_grammar_id {
        let instructions = grammar_instructions(g)
            .ok_or_else(|| LlmError::InvalidConfig(format!("unknown response grammar `{g}`")))?;
        out.push_str(&format!("\n\n## response format\n{instructions}"));
    }
    Ok(out)
}
