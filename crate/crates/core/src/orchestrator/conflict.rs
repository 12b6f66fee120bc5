use serde::{Deserialize, Serialize};

use crate::tools::ToolResult;
use crate::tree::SymbolicVerdict;

use super::OrchestratorError;

/// Tree confidence at or below which the tree counts as undetermined.
pub const UNDETERMINED_CONFIDENCE: f64 = 0.5;

pub const DEFAULT_THETA_TREE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ConflictRule {
    TreeWinsIfConfidenceGe { theta: f64 },
    LlmWinsIfTreeUndetermined,
    AgreementPasses,
    /// Asks the named tool to arbitrate. The tool receives `{"key": <source
    /// id>}` and must answer `{"found", "value"}`; a found value equal to one
    /// of the two candidates decides.
    EscalateToTool { tool_name: String },
    TreeFallback,
    LlmFallback,
}

impl ConflictRule {
    pub fn name(&self) -> &'static str {
        match self {
            ConflictRule::TreeWinsIfConfidenceGe { .. } => "tree_wins_if_confidence_ge",
            ConflictRule::LlmWinsIfTreeUndetermined => "llm_wins_if_tree_undetermined",
            ConflictRule::AgreementPasses => "agreement_passes",
            ConflictRule::EscalateToTool { .. } => "escalate_to_tool",
            ConflictRule::TreeFallback => "tree_fallback",
            ConflictRule::LlmFallback => "llm_fallback",
        }
    }

    fn is_total(&self) -> bool {
        matches!(self, ConflictRule::TreeFallback | ConflictRule::LlmFallback)
    }
}

/// An ordered priority list whose last entry always decides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ConflictRule>", into = "Vec<ConflictRule>")]
pub struct ConflictPolicy {
    rules: Vec<ConflictRule>,
}

impl TryFrom<Vec<ConflictRule>> for ConflictPolicy {
    type Error = OrchestratorError;

    fn try_from(rules: Vec<ConflictRule>) -> Result<Self, Self::Error> {
        Self::new(rules)
    }
}

impl From<ConflictPolicy> for Vec<ConflictRule> {
    fn from(p: ConflictPolicy) -> Self {
        p.rules
    }
}

impl Default for ConflictPolicy {
    fn default() -> Self {
        Self {
            rules: vec![
                ConflictRule::TreeWinsIfConfidenceGe {
                    theta: DEFAULT_THETA_TREE,
                },
                ConflictRule::LlmWinsIfTreeUndetermined,
                ConflictRule::TreeFallback,
            ],
        }
    }
}

impl ConflictPolicy {
    pub fn new(rules: Vec<ConflictRule>) -> Result<Self, OrchestratorError> {
        match rules.last() {
            None => return Err(OrchestratorError::InvalidConfig("conflict rule list is empty".into())),
            Some(r) if !r.is_total() => {
                return Err(OrchestratorError::InvalidConfig(format!(
                    "last conflict rule `{}` is not total; end with tree_fallback or llm_fallback",
                    r.name()
                )))
            }
            _ => {}
        }
        for r in &rules {
            if let ConflictRule::TreeWinsIfConfidenceGe { theta } = r {
                if !(0.0..=1.0).contains(theta) {
                    return Err(OrchestratorError::InvalidConfig(format!("theta {theta} is outside [0, 1]")));
                }
            }
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[ConflictRule] {
        &self.rules
    }

    /// The first confidence threshold in the list, if any.
    pub fn theta_tree(&self) -> Option<f64> {
        self.rules.iter().find_map(|r| match r {
            ConflictRule::TreeWinsIfConfidenceGe { theta } => Some(*theta),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Tree,
    Llm,
    Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub answer: String,
    pub winner: Winner,
    /// Name of the deciding rule, or `agreement`.
    pub rule: String,
    pub justification: String,
    /// The arbitration result, when an escalation rule was tried.
    pub escalation: Option<ToolResult>,
}

fn fmt_theta(theta: Option<f64>) -> String {
    theta.map_or_else(|| "n/a".to_string(), |t| format!("{t:.2}"))
}

/// Settles a tree/LLM pair without escalation; escalation rules are skipped.
pub fn resolve_conflict(y_tree: &SymbolicVerdict, y_llm: &str, rules: &ConflictPolicy) -> Resolution {
    resolve_conflict_with(y_tree, y_llm, rules, &mut |_| None)
}

/// Settles a tree/LLM pair. `arbiter` runs an escalation tool and returns its
/// result, or `None` when the tool cannot be reached.
pub fn resolve_conflict_with(
    y_tree: &SymbolicVerdict,
    y_llm: &str,
    rules: &ConflictPolicy,
    arbiter: &mut dyn FnMut(&str) -> Option<ToolResult>,
) -> Resolution {
    let conf = y_tree.confidence;
    let theta = rules.theta_tree();
    let context = format!("theta_tree {}, tree confidence {conf:.2}", fmt_theta(theta));
    let tree_answer = y_tree.outcome.as_str();
    let decided = |answer: &str, winner, rule: &ConflictRule, why: String, escalation| Resolution {
        answer: answer.to_string(),
        winner,
        rule: rule.name().to_string(),
        justification: format!("{}: {why} ({context})", rule.name()),
        escalation,
    };

    if tree_answer == y_llm {
        return Resolution {
            answer: y_llm.to_string(),
            winner: Winner::Agreement,
            rule: "agreement".into(),
            justification: format!("agreement: tree and llm both answer {y_llm} ({context})"),
            escalation: None,
        };
    }
    let mut escalation = None;
    for rule in rules.rules() {
        match rule {
            ConflictRule::TreeWinsIfConfidenceGe { theta } if conf >= *theta => {
                return decided(tree_answer, Winner::Tree, rule, format!("{conf:.2} ≥ {theta:.2}"), escalation)
            }
            ConflictRule::LlmWinsIfTreeUndetermined if conf <= UNDETERMINED_CONFIDENCE => {
                return decided(
                    y_llm,
                    Winner::Llm,
                    rule,
                    format!("tree confidence {conf:.2} has no majority"),
                    escalation,
                )
            }
            ConflictRule::EscalateToTool { tool_name } => {
                if let Some(result) = arbiter(tool_name) {
                    let verdict = result
                        .payload()
                        .filter(|p| p["found"] == true)
                        .and_then(|p| p["value"].as_str())
                        .map(String::from);
                    escalation = Some(result);
                    match verdict.as_deref() {
                        Some(v) if v == tree_answer => {
                            return decided(tree_answer, Winner::Tree, rule, format!("{tool_name} sided with the tree"), escalation)
                        }
                        Some(v) if v == y_llm => {
                            return decided(y_llm, Winner::Llm, rule, format!("{tool_name} sided with the llm"), escalation)
                        }
                        _ => {}
                    }
                }
            }
            ConflictRule::TreeFallback => {
                return decided(tree_answer, Winner::Tree, rule, "no earlier rule applied".into(), escalation)
            }
            ConflictRule::LlmFallback => {
                return decided(y_llm, Winner::Llm, rule, "no earlier rule applied".into(), escalation)
            }
            _ => {}
        }
    }
    unreachable!("the last conflict rule is total by construction")
}
