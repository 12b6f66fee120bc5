//! The orchestrator's belief state: an append-only, provenance-stamped log of
//! everything the modules produced during one episode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{AgentMove, NeuralResponse};
use crate::orchestrator::Resolution;
use crate::tools::ToolResult;
use crate::tree::SymbolicVerdict;
use crate::types::{canonical_json, digest, Action, Actor, StructuredInput, ToolQuery};

/// Terminal answer recorded by a `Finalize` action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalization {
    pub answer: String,
    /// Which belief entry supplied the answer: `resolution`, `agreement`,
    /// `tree`, `llm`, or `none`.
    pub source: String,
    pub resolution: Option<Resolution>,
}

/// An unrecoverable module failure (for example, a remote backend that stayed
/// down through every retry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub actor: Actor,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum BeliefEvent {
    TreeVerdict(SymbolicVerdict),
    NeuralResponse(NeuralResponse),
    ToolResult(ToolResult),
    ConflictResolution(Resolution),
    Finalization(Finalization),
    Failure(Failure),
}

impl BeliefEvent {
    pub fn name(&self) -> &'static str {
        match self {
            BeliefEvent::TreeVerdict(_) => "tree_verdict",
            BeliefEvent::NeuralResponse(_) => "neural_response",
            BeliefEvent::ToolResult(_) => "tool_result",
            BeliefEvent::ConflictResolution(_) => "conflict_resolution",
            BeliefEvent::Finalization(_) => "finalization",
            BeliefEvent::Failure(_) => "failure",
        }
    }

    pub fn digest(&self) -> String {
        digest(canonical_json(self).as_bytes())
    }

    /// One-line human summary used by prompts and text exports.
    pub fn summary(&self) -> String {
        match self {
            BeliefEvent::TreeVerdict(v) => format!(
                "tree verdict {} (confidence {:.2}, {} step trace)",
                v.outcome,
                v.confidence,
                v.trace_len()
            ),
            BeliefEvent::NeuralResponse(r) => match &r.parsed {
                Some(m) => format!("llm {}", m.summary()),
                None => format!("llm malformed output ({})", r.parse_status.reason().unwrap_or("")),
            },
            BeliefEvent::ToolResult(t) => t.summary(),
            BeliefEvent::ConflictResolution(r) => {
                format!("conflict resolved for {} by {:?} ({})", r.answer, r.winner, r.rule)
            }
            BeliefEvent::Finalization(f) => format!("final answer {} from {}", f.answer, f.source),
            BeliefEvent::Failure(f) => format!("{} failure {}: {}", f.actor, f.kind, f.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub step_index: u64,
    pub actor: Actor,
    pub action: Action,
    pub payload_digest: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BeliefError {
    #[error("events and provenance differ in length ({events} vs {provenance})")]
    Misaligned { events: usize, provenance: usize },
    #[error("provenance step_index not strictly increasing at entry {0}")]
    StepOrder(usize),
    #[error("provenance digest does not match event {0}")]
    DigestMismatch(usize),
}

/// The belief state `c`. Events are only ever appended; each carries exactly
/// one provenance record at the same index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBelief")]
pub struct BeliefState {
    input: StructuredInput,
    events: Vec<BeliefEvent>,
    provenance: Vec<ProvenanceRecord>,
    clock: u64,
}

#[derive(Deserialize)]
struct RawBelief {
    input: StructuredInput,
    events: Vec<BeliefEvent>,
    provenance: Vec<ProvenanceRecord>,
    clock: u64,
}

impl TryFrom<RawBelief> for BeliefState {
    type Error = BeliefError;

    fn try_from(raw: RawBelief) -> Result<Self, Self::Error> {
        let belief = BeliefState {
            input: raw.input,
            events: raw.events,
            provenance: raw.provenance,
            clock: raw.clock,
        };
        belief.verify()?;
        Ok(belief)
    }
}

impl BeliefState {
    pub fn new(input: StructuredInput) -> Self {
        Self {
            input,
            events: Vec::new(),
            provenance: Vec::new(),
            clock: 0,
        }
    }

    /// Folds a sequence of events into a fresh belief, one append per event.
    pub fn fold<I>(input: StructuredInput, events: I) -> Self
    where
        I: IntoIterator<Item = (BeliefEvent, Actor, Action)>,
    {
        events
            .into_iter()
            .fold(Self::new(input), |c, (e, actor, action)| update_belief(c, e, actor, action))
    }

    pub fn input(&self) -> &StructuredInput {
        &self.input
    }

    pub fn events(&self) -> &[BeliefEvent] {
        &self.events
    }

    pub fn provenance(&self) -> &[ProvenanceRecord] {
        &self.provenance
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Appends one event, stamping a provenance record at the current logical
    /// time. The clock then advances by `ticks` (at least one).
    pub fn append(&mut self, event: BeliefEvent, actor: Actor, action: Action, ticks: u64) -> &ProvenanceRecord {
        let record = ProvenanceRecord {
            step_index: self.events.len() as u64,
            actor,
            action,
            payload_digest: event.digest(),
            timestamp: self.clock,
        };
        self.clock += ticks.max(1);
        self.events.push(event);
        self.provenance.push(record);
        self.provenance.last().expect("just pushed")
    }

    /// Re-checks alignment, ordering and digests.
    pub fn verify(&self) -> Result<(), BeliefError> {
        if self.events.len() != self.provenance.len() {
            return Err(BeliefError::Misaligned {
                events: self.events.len(),
                provenance: self.provenance.len(),
            });
        }
        for (i, (e, p)) in self.events.iter().zip(&self.provenance).enumerate() {
            if i > 0 && p.step_index <= self.provenance[i - 1].step_index {
                return Err(BeliefError::StepOrder(i));
            }
            if e.digest() != p.payload_digest {
                return Err(BeliefError::DigestMismatch(i));
            }
        }
        Ok(())
    }

    /// Ψ in its event-fold form: the optional tree verdict, neural response and
    /// tool result are appended in that order, whichever are present.
    pub fn absorb(
        self,
        y_tree: Option<SymbolicVerdict>,
        y_llm: Option<(NeuralResponse, String)>,
        z: Option<(ToolResult, ToolQuery)>,
    ) -> Self {
        let mut c = self;
        if let Some(v) = y_tree {
            c = update_belief(c, BeliefEvent::TreeVerdict(v), Actor::Tree, Action::CallTree);
        }
        if let Some((r, template_id)) = y_llm {
            c = update_belief(c, BeliefEvent::NeuralResponse(r), Actor::Llm, Action::CallLlm { template_id });
        }
        if let Some((t, query)) = z {
            c = update_belief(c, BeliefEvent::ToolResult(t), Actor::Tool, Action::CallTool { query });
        }
        c
    }

    pub fn latest_tree_verdict(&self) -> Option<&SymbolicVerdict> {
        self.events.iter().rev().find_map(|e| match e {
            BeliefEvent::TreeVerdict(v) => Some(v),
            _ => None,
        })
    }

    pub fn latest_neural_response(&self) -> Option<&NeuralResponse> {
        self.events.iter().rev().find_map(|e| match e {
            BeliefEvent::NeuralResponse(r) => Some(r),
            _ => None,
        })
    }

    /// The most recent `Answer` move from the language model, with its rationale.
    pub fn latest_llm_answer(&self) -> Option<(&str, &str)> {
        self.events.iter().rev().find_map(|e| match e {
            BeliefEvent::NeuralResponse(NeuralResponse {
                parsed: Some(AgentMove::Answer { label, rationale }),
                ..
            }) => Some((label.as_str(), rationale.as_str())),
            _ => None,
        })
    }

    pub fn latest_resolution(&self) -> Option<&Resolution> {
        self.events.iter().rev().find_map(|e| match e {
            BeliefEvent::ConflictResolution(r) => Some(r),
            _ => None,
        })
    }

    pub fn tool_results(&self) -> impl Iterator<Item = &ToolResult> {
        self.events.iter().filter_map(|e| match e {
            BeliefEvent::ToolResult(t) => Some(t),
            _ => None,
        })
    }

    pub fn malformed_responses(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, BeliefEvent::NeuralResponse(r) if r.parsed.is_none()))
            .count()
    }

    pub fn is_finalized(&self) -> bool {
        self.events.iter().any(|e| matches!(e, BeliefEvent::Finalization(_)))
    }
}

/// Ψ for a single event: returns `c` with `event` appended and stamped.
/// Prior entries are untouched.
pub fn update_belief(c: BeliefState, event: BeliefEvent, actor: Actor, action: Action) -> BeliefState {
    let mut c = c;
    c.append(event, actor, action, 1);
    c
}
