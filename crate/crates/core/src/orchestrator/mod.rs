//! The central orchestrator: belief update, dispatch under a rule list or a
//! learned policy, conflict resolution and budget enforcement.
//!
//! [`dispatch`] is a pure function of the belief state. Everything it needs
//! (usage counters, pending tool calls, open disagreements) is derived from
//! the event log, so a transcript can be replayed decision by decision.

mod conflict;
mod episode;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::belief::{BeliefEvent, BeliefState, Finalization};
use crate::llm::{AgentMove, LlmError};
use crate::perception::PerceptionError;
use crate::policy::{action_distribution, featurize_state, PolicyError, PolicyParams};
use crate::tools::CONSISTENCY;
use crate::tree::SymbolicVerdict;
use crate::types::{Action, ToolQuery};

pub use crate::belief::update_belief;
pub use conflict::{
    resolve_conflict, resolve_conflict_with, ConflictPolicy, ConflictRule, Resolution, Winner, DEFAULT_THETA_TREE,
    UNDETERMINED_CONFIDENCE,
};
pub use episode::{
    export_trace, import_transcript, run_episode, run_episode_with, BackendFailure, EpisodeEnv, EpisodeSettings, EpisodeTranscript,
    PolicyStep, TerminalStatus, TraceFormat, TRANSCRIPT_FORMAT,
};

/// The default LLM template id.
pub const DEFAULT_TEMPLATE: &str = "default";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("no admissible action: every budget is exhausted")]
    NoAdmissibleAction,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("malformed transcript: {0}")]
    MalformedTranscript(String),
}

impl OrchestratorError {
    pub fn kind(&self) -> &'static str {
        match self {
            OrchestratorError::NoAdmissibleAction => "no_admissible_action",
            OrchestratorError::InvalidConfig(_) => "invalid_config",
            OrchestratorError::Perception(e) => e.kind(),
            OrchestratorError::Llm(e) => e.kind(),
            OrchestratorError::Policy(e) => e.kind(),
            OrchestratorError::MalformedTranscript(_) => "malformed_transcript",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_steps: u32,
    pub max_tool_calls: u32,
    pub max_llm_calls: u32,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_steps: 12,
            max_tool_calls: 4,
            max_llm_calls: 4,
        }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.max_steps == 0 || self.max_tool_calls == 0 || self.max_llm_calls == 0 {
            return Err(OrchestratorError::InvalidConfig("every budget field must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u32,
    pub tool_calls: u32,
    pub llm_calls: u32,
}

impl Counters {
    pub fn of_actions<'a>(actions: impl IntoIterator<Item = &'a Action>) -> Self {
        let mut c = Counters::default();
        for a in actions {
            c.steps += 1;
            match a {
                Action::CallTool { .. } => c.tool_calls += 1,
                Action::CallLlm { .. } => c.llm_calls += 1,
                _ => {}
            }
        }
        c
    }

    pub fn of_belief(c: &BeliefState) -> Self {
        Self::of_actions(c.provenance().iter().map(|p| &p.action))
    }
}

/// Which modules an episode can reach at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub tree: bool,
    pub llm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoTreeVerdict,
    NoLlmResponse,
    /// The latest reply was malformed and no earlier reply was.
    LlmMalformedRetry,
    /// The latest reply asked for a tool or a hypothesis check that has not run.
    ToolPending,
    /// A tool answered, or the model sent a plan, since the model last spoke.
    LlmFollowUpDue,
    /// Tree and model answers differ and no resolution has been made since.
    Disagreement,
    Always,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Step {
    CallTree,
    CallLlm { template_id: String },
    CallTool,
    ResolveConflict,
    Finalize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRule {
    pub when: Condition,
    pub then: Step,
}

impl DispatchRule {
    pub fn new(when: Condition, then: Step) -> Self {
        Self { when, then }
    }
}

fn call_llm() -> Step {
    Step::CallLlm {
        template_id: DEFAULT_TEMPLATE.into(),
    }
}

/// CallTree, CallLLM (one retry on malformed output), pending tools, conflict
/// resolution, then Finalize.
pub fn default_rules() -> Vec<DispatchRule> {
    use Condition::*;
    vec![
        DispatchRule::new(NoTreeVerdict, Step::CallTree),
        DispatchRule::new(NoLlmResponse, call_llm()),
        DispatchRule::new(LlmMalformedRetry, call_llm()),
        DispatchRule::new(ToolPending, Step::CallTool),
        DispatchRule::new(LlmFollowUpDue, call_llm()),
        DispatchRule::new(Disagreement, Step::ResolveConflict),
        DispatchRule::new(Always, Step::Finalize),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DispatchPolicy {
    RuleBased { rules: Vec<DispatchRule> },
    Learned { params: PolicyParams },
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        DispatchPolicy::RuleBased { rules: default_rules() }
    }
}

impl DispatchPolicy {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        match self {
            DispatchPolicy::RuleBased { rules } => match rules.last() {
                Some(DispatchRule {
                    when: Condition::Always,
                    then: Step::Finalize,
                }) => Ok(()),
                _ => Err(OrchestratorError::InvalidConfig(
                    "a rule list must end with an unconditional finalize".into(),
                )),
            },
            DispatchPolicy::Learned { params } => Ok(params.validate()?),
        }
    }
}

/// Event positions the dispatch conditions look at.
#[derive(Debug, Default)]
pub(crate) struct View {
    tree: Option<usize>,
    neural: Option<usize>,
    answer: Option<usize>,
    tool: Option<usize>,
    resolution: Option<usize>,
}

impl View {
    pub(crate) fn of(c: &BeliefState) -> Self {
        let mut v = View::default();
        for (i, e) in c.events().iter().enumerate() {
            match e {
                BeliefEvent::TreeVerdict(_) => v.tree = Some(i),
                BeliefEvent::NeuralResponse(r) => {
                    v.neural = Some(i);
                    if matches!(r.parsed, Some(AgentMove::Answer { .. })) {
                        v.answer = Some(i);
                    }
                }
                BeliefEvent::ToolResult(_) => v.tool = Some(i),
                BeliefEvent::ConflictResolution(_) => v.resolution = Some(i),
                _ => {}
            }
        }
        v
    }
}

fn latest_move(c: &BeliefState) -> Option<&AgentMove> {
    c.latest_neural_response().and_then(|r| r.parsed.as_ref())
}

/// The tool query requested by the latest reply, if it has not been served.
pub fn pending_query(c: &BeliefState) -> Option<ToolQuery> {
    let view = View::of(c);
    let neural = view.neural?;
    if view.tool.is_some_and(|t| t > neural) {
        return None;
    }
    let query_id = format!("q{}", Counters::of_belief(c).tool_calls + 1);
    match latest_move(c)? {
        AgentMove::ToolCall { tool_name, arguments } => Some(ToolQuery {
            tool_name: tool_name.clone(),
            arguments: arguments.clone(),
            query_id,
        }),
        AgentMove::HypothesisCheck {
            assignment,
            claimed_label,
        } => {
            let assignment: Map<String, Value> = assignment.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
            Some(ToolQuery {
                tool_name: CONSISTENCY.into(),
                arguments: json!({"assignment": assignment, "claimed_label": claimed_label}),
                query_id,
            })
        }
        _ => None,
    }
}

fn holds(cond: Condition, c: &BeliefState) -> bool {
    let view = View::of(c);
    match cond {
        Condition::NoTreeVerdict => view.tree.is_none(),
        Condition::NoLlmResponse => view.neural.is_none(),
        Condition::LlmMalformedRetry => {
            c.latest_neural_response().is_some_and(|r| r.parsed.is_none()) && c.malformed_responses() < 2
        }
        Condition::ToolPending => pending_query(c).is_some(),
        Condition::LlmFollowUpDue => match view.neural {
            Some(n) => view.tool.is_some_and(|t| t > n) || matches!(latest_move(c), Some(AgentMove::Plan { .. })),
            None => false,
        },
        Condition::Disagreement => match (c.latest_tree_verdict(), c.latest_llm_answer()) {
            (Some(v), Some((label, _))) if v.outcome != label => {
                let newest = view.tree.max(view.answer);
                !view.resolution.is_some_and(|r| Some(r) > newest)
            }
            _ => false,
        },
        Condition::Always => true,
    }
}

/// The answer a `Finalize` issued now would carry, with its source.
pub fn final_answer(c: &BeliefState, conflict: &ConflictPolicy) -> Finalization {
    let view = View::of(c);
    let tree = c.latest_tree_verdict();
    let llm = c.latest_llm_answer().map(|(l, _)| l);
    if let (Some(r), true) = (c.latest_resolution(), view.resolution > view.tree.max(view.answer)) {
        return Finalization {
            answer: r.answer.clone(),
            source: "resolution".into(),
            resolution: Some(r.clone()),
        };
    }
    let (answer, source, resolution) = match (tree, llm) {
        (Some(v), Some(l)) => {
            let r = resolve_conflict(v, l, conflict);
            let source = if r.winner == Winner::Agreement { "agreement" } else { "resolution" };
            (r.answer.clone(), source, Some(r))
        }
        (Some(v), None) => (v.outcome.clone(), "tree", None),
        (None, Some(l)) => (l.to_string(), "llm", None),
        (None, None) => ("unknown".to_string(), "none", None),
    };
    Finalization {
        answer,
        source: source.into(),
        resolution,
    }
}

/// Learned-policy action slots, in tie-break order.
pub const POLICY_ACTIONS: [&str; 4] = ["call_tree", "call_llm", "call_tool", "finalize"];

/// Which of the four policy actions are admissible now.
pub fn admissible(c: &BeliefState, budget: &Budget, caps: Capabilities) -> [bool; 4] {
    let used = Counters::of_belief(c);
    [
        caps.tree,
        caps.llm && used.llm_calls < budget.max_llm_calls,
        used.tool_calls < budget.max_tool_calls && pending_query(c).is_some(),
        true,
    ]
}

/// Turns a policy slot into a concrete action.
pub fn policy_action(slot: usize, c: &BeliefState, conflict: &ConflictPolicy) -> Action {
    match slot {
        0 => Action::CallTree,
        1 => Action::CallLlm {
            template_id: DEFAULT_TEMPLATE.into(),
        },
        2 => Action::CallTool {
            query: pending_query(c).expect("call_tool is only admissible with a pending query"),
        },
        _ => Action::Finalize {
            answer: final_answer(c, conflict).answer,
        },
    }
}

fn step_admissible(step: &Step, c: &BeliefState, budget: &Budget, caps: Capabilities) -> bool {
    let mask = admissible(c, budget, caps);
    match step {
        Step::CallTree => mask[0],
        Step::CallLlm { .. } => mask[1],
        Step::CallTool => mask[2],
        Step::ResolveConflict => c.latest_tree_verdict().is_some() && c.latest_llm_answer().is_some(),
        Step::Finalize => true,
    }
}

/// Chooses the next action. Rule lists take the first rule whose condition
/// holds and whose action is admissible; learned policies take the argmax of
/// the masked action distribution.
pub fn dispatch(
    c: &BeliefState,
    policy: &DispatchPolicy,
    conflict: &ConflictPolicy,
    budget: &Budget,
    caps: Capabilities,
) -> Result<Action, OrchestratorError> {
    if Counters::of_belief(c).steps >= budget.max_steps {
        return Err(OrchestratorError::NoAdmissibleAction);
    }
    match policy {
        DispatchPolicy::RuleBased { rules } => {
            let rule = rules
                .iter()
                .find(|r| holds(r.when, c) && step_admissible(&r.then, c, budget, caps))
                .ok_or(OrchestratorError::NoAdmissibleAction)?;
            Ok(match &rule.then {
                Step::CallTree => Action::CallTree,
                Step::CallLlm { template_id } => Action::CallLlm {
                    template_id: template_id.clone(),
                },
                Step::CallTool => Action::CallTool {
                    query: pending_query(c).expect("checked by admissibility"),
                },
                Step::ResolveConflict => Action::ResolveConflict,
                Step::Finalize => Action::Finalize {
                    answer: final_answer(c, conflict).answer,
                },
            })
        }
        DispatchPolicy::Learned { params } => {
            let mask = admissible(c, budget, caps);
            let probs = action_distribution(params, &featurize_state(c, budget), &mask)?;
            let mut best = 0;
            for a in 1..probs.len() {
                // strict comparison keeps the earlier slot on ties
                if mask[a] && (!mask[best] || probs[a] > probs[best]) {
                    best = a;
                }
            }
            Ok(policy_action(best, c, conflict))
        }
    }
}

/// Convenience: the tree verdict and model answer currently in conflict.
pub fn open_conflict(c: &BeliefState) -> Option<(&SymbolicVerdict, &str)> {
    if holds(Condition::Disagreement, c) {
        Some((c.latest_tree_verdict()?, c.latest_llm_answer()?.0))
    } else {
        None
    }
}
