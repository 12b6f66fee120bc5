use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::belief::{BeliefEvent, BeliefState, Failure};
use crate::llm::{
    builtin_templates, parse_move, render_prompt, Backend, BackendConfig, PromptContext, PromptTemplate,
    DIRECTIVE_GRAMMAR,
};
use crate::perception::{normalize, FittedImputer, RawRecord};
use crate::policy::{action_distribution, featurize_state};
use crate::tools::Registry;
use crate::tree::Model;
use crate::types::{canonical_json, Action, Actor, Schema, ToolQuery};

use super::{
    admissible, dispatch, final_answer, policy_action, resolve_conflict_with, Budget, Capabilities, ConflictPolicy,
    Counters, DispatchPolicy, OrchestratorError, Step,
};

pub const TRANSCRIPT_FORMAT: &str = "oracle-episode/1";

/// Shared read-only resources for many episodes.
#[derive(Debug, Clone)]
pub struct EpisodeEnv {
    pub schema: Schema,
    pub imputer: FittedImputer,
    pub model: Option<Arc<Model>>,
    pub registry: Arc<Registry>,
    pub templates: Vec<PromptTemplate>,
}

impl EpisodeEnv {
    /// Strict imputation (missing features are rejected) and the built-in
    /// templates.
    pub fn new(schema: Schema, model: Option<Arc<Model>>, registry: Arc<Registry>) -> Result<Self, OrchestratorError> {
        if let Some(m) = &model {
            if m.schema().digest() != schema.digest() {
                return Err(OrchestratorError::InvalidConfig("model was trained on a different schema".into()));
            }
        }
        Ok(Self {
            imputer: FittedImputer::reject_all(&schema),
            schema,
            model,
            registry,
            templates: builtin_templates(),
        })
    }

    pub fn with_imputer(mut self, imputer: FittedImputer) -> Self {
        self.imputer = imputer;
        self
    }

    fn template(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendFailure {
    /// End the episode with `terminal_status = error`.
    #[default]
    Abort,
    /// Log the failure and continue without the language model.
    Continue,
}

/// Per-episode knobs. Every field has a default, so a partial JSON object is a
/// valid override set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSettings {
    pub policy: DispatchPolicy,
    pub conflict: ConflictPolicy,
    pub budget: Budget,
    pub backend: BackendConfig,
    pub seed: u64,
    /// Finalize right after the first module output.
    pub auto_finalize: bool,
    /// Sample learned-policy actions instead of taking the argmax.
    pub explore: bool,
    pub on_backend_failure: BackendFailure,
    pub task_instruction: Option<String>,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            policy: DispatchPolicy::default(),
            conflict: ConflictPolicy::default(),
            budget: Budget::default(),
            backend: BackendConfig::tree_echo(),
            seed: 0,
            auto_finalize: false,
            explore: false,
            on_backend_failure: BackendFailure::Abort,
            task_instruction: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Answered,
    BudgetExhausted,
    Error,
}

impl fmt::Display for TerminalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminalStatus::Answered => "answered",
            TerminalStatus::BudgetExhausted => "budget_exhausted",
            TerminalStatus::Error => "error",
        })
    }
}

/// One learned-policy decision, kept for policy-gradient updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub features: [f64; 7],
    pub mask: [bool; 4],
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTranscript {
    pub format: String,
    pub seed: u64,
    pub schema_digest: String,
    pub belief: BeliefState,
    pub actions: Vec<Action>,
    pub answer: Option<String>,
    pub counters: Counters,
    pub terminal_status: TerminalStatus,
    /// Provenance index of the event that ended the episode in error.
    pub error_index: Option<u64>,
    pub policy_steps: Vec<PolicyStep>,
}

impl EpisodeTranscript {
    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn digest(&self) -> String {
        crate::types::digest(self.to_json().as_bytes())
    }

    /// Structural checks that hold for every transcript this crate emits.
    pub fn check(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::MalformedTranscript(m));
        if self.format != TRANSCRIPT_FORMAT {
            return bad(format!("unsupported format `{}`", self.format));
        }
        if let Err(e) = self.belief.verify() {
            return bad(e.to_string());
        }
        let logged: Vec<&Action> = self.belief.provenance().iter().map(|p| &p.action).collect();
        if logged != self.actions.iter().collect::<Vec<_>>() {
            return bad("action sequence differs from the provenance log".into());
        }
        if Counters::of_actions(&self.actions) != self.counters {
            return bad("counters do not match the action sequence".into());
        }
        let last_finalize = matches!(self.actions.last(), Some(Action::Finalize { .. }));
        if (self.terminal_status == TerminalStatus::Answered) != last_finalize {
            return bad("terminal status `answered` must coincide with a final Finalize".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Json,
    Text,
}

impl FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(TraceFormat::Json),
            "text" => Ok(TraceFormat::Text),
            other => Err(format!("unknown trace format `{other}`; expected json or text")),
        }
    }
}

/// JSON is the canonical transcript. Text has `#` header lines and then one
/// `step N [actor] action → summary` line per event, each ending in its digest.
pub fn export_trace(t: &EpisodeTranscript, format: TraceFormat) -> Vec<u8> {
    match format {
        TraceFormat::Json => t.to_json().into_bytes(),
        TraceFormat::Text => {
            let mut out = format!(
                "# episode {} seed {}\n# source {}\n# status {} answer {}\n# counters steps {} tool_calls {} llm_calls {}\n",
                t.format,
                t.seed,
                t.belief.input().source_id,
                t.terminal_status,
                t.answer.as_deref().unwrap_or("-"),
                t.counters.steps,
                t.counters.tool_calls,
                t.counters.llm_calls,
            );
            for (e, p) in t.belief.events().iter().zip(t.belief.provenance()) {
                out.push_str(&format!(
                    "step {} [{}] {} → {} (digest {})\n",
                    p.step_index,
                    p.actor,
                    p.action.name(),
                    e.summary(),
                    p.payload_digest
                ));
            }
            out.into_bytes()
        }
    }
}

pub fn import_transcript(bytes: &[u8]) -> Result<EpisodeTranscript, OrchestratorError> {
    let t: EpisodeTranscript =
        serde_json::from_slice(bytes).map_err(|e| OrchestratorError::MalformedTranscript(e.to_string()))?;
    t.check()?;
    Ok(t)
}

enum Flow {
    Continue,
    Finalized,
    Fatal(u64),
}

struct Runner<'a> {
    env: &'a EpisodeEnv,
    settings: &'a EpisodeSettings,
    backend: Backend,
    belief: BeliefState,
    actions: Vec<Action>,
    llm_up: bool,
}

impl Runner<'_> {
    fn caps(&self) -> Capabilities {
        Capabilities {
            tree: self.env.model.is_some(),
            llm: self.llm_up,
        }
    }

    fn push(&mut self, event: BeliefEvent, actor: Actor, action: Action, ticks: u64) -> u64 {
        self.actions.push(action.clone());
        self.belief.append(event, actor, action, ticks).step_index
    }

    fn execute(&mut self, action: Action) -> Flow {
        match &action {
            Action::CallTree => {
                let model = self.env.model.as_ref().expect("call_tree requires a model");
                match model.predict(self.belief.input()) {
                    Ok(v) => {
                        self.push(BeliefEvent::TreeVerdict(v), Actor::Tree, action, 1);
                        Flow::Continue
                    }
                    Err(e) => {
                        let f = Failure {
                            actor: Actor::Tree,
                            kind: e.kind().into(),
                            message: e.to_string(),
                        };
                        Flow::Fatal(self.push(BeliefEvent::Failure(f), Actor::Tree, action, 1))
                    }
                }
            }
            Action::CallLlm { template_id } => {
                let template = self.env.template(template_id).expect("templates are checked before the loop");
                let ctx = PromptContext {
                    schema: Some(self.env.schema.clone()),
                    tool_roster: self.env.registry.roster(),
                    task_instruction: self.settings.task_instruction.clone(),
                };
                let grammar = template.response_grammar_id.as_deref().unwrap_or(DIRECTIVE_GRAMMAR).to_string();
                let reply = render_prompt(template, &self.belief, &ctx).and_then(|p| self.backend.generate(&p));
                match reply {
                    Ok(raw) => {
                        let r = parse_move(&raw, &grammar);
                        self.push(BeliefEvent::NeuralResponse(r), Actor::Llm, action, 1);
                        Flow::Continue
                    }
                    Err(e) => {
                        let f = Failure {
                            actor: Actor::Llm,
                            kind: e.kind().into(),
                            message: e.to_string(),
                        };
                        let idx = self.push(BeliefEvent::Failure(f), Actor::Llm, action, 1);
                        match self.settings.on_backend_failure {
                            BackendFailure::Abort => Flow::Fatal(idx),
                            BackendFailure::Continue => {
                                self.llm_up = false;
                                Flow::Continue
                            }
                        }
                    }
                }
            }
            Action::CallTool { query } => {
                let result = self.env.registry.invoke(query);
                let ticks = result.elapsed;
                self.push(BeliefEvent::ToolResult(result), Actor::Tool, action, ticks);
                Flow::Continue
            }
            Action::ResolveConflict => {
                let verdict = self.belief.latest_tree_verdict().expect("admissibility").clone();
                let label = self.belief.latest_llm_answer().expect("admissibility").0.to_string();
                let source = self.belief.input().source_id.clone();
                let step = self.belief.len();
                let registry = &self.env.registry;
                let mut arbiter = |tool: &str| {
                    Some(registry.invoke(&ToolQuery {
                        tool_name: tool.into(),
                        arguments: json!({ "key": source }),
                        query_id: format!("escalation-{step}"),
                    }))
                };
                let r = resolve_conflict_with(&verdict, &label, &self.settings.conflict, &mut arbiter);
                self.push(BeliefEvent::ConflictResolution(r), Actor::Orchestrator, action, 1);
                Flow::Continue
            }
            Action::Finalize { .. } => {
                let f = final_answer(&self.belief, &self.settings.conflict);
                let action = Action::Finalize {
                    answer: f.answer.clone(),
                };
                self.push(BeliefEvent::Finalization(f), Actor::Orchestrator, action, 1);
                Flow::Finalized
            }
        }
    }
}

fn check_templates(env: &EpisodeEnv, policy: &DispatchPolicy) -> Result<(), OrchestratorError> {
    let mut ids = vec![super::DEFAULT_TEMPLATE.to_string()];
    if let DispatchPolicy::RuleBased { rules } = policy {
        ids.extend(rules.iter().filter_map(|r| match &r.then {
            Step::CallLlm { template_id } => Some(template_id.clone()),
            _ => None,
        }));
    }
    match ids.iter().find(|id| env.template(id).is_none()) {
        Some(id) => Err(OrchestratorError::InvalidConfig(format!("unknown prompt template `{id}`"))),
        None => Ok(()),
    }
}

/// Runs one episode: normalize `x0`, then dispatch and execute until Finalize
/// or budget exhaustion. Every action leaves exactly one belief event.
///
/// Errors are returned only for problems detected before the first action
/// (invalid settings, a record that does not fit the schema). Failures during
/// the loop end the episode with `terminal_status = error` instead.
pub fn run_episode(
    x0: &RawRecord,
    env: &EpisodeEnv,
    settings: &EpisodeSettings,
) -> Result<EpisodeTranscript, OrchestratorError> {
    run_episode_with(x0, env, settings, &Backend::new(&settings.backend)?)
}

/// [`run_episode`] with a prebuilt backend, which takes the place of
/// `settings.backend`. Lets batch runs compile a rule table once.
pub fn run_episode_with(
    x0: &RawRecord,
    env: &EpisodeEnv,
    settings: &EpisodeSettings,
    backend: &Backend,
) -> Result<EpisodeTranscript, OrchestratorError> {
    settings.budget.validate()?;
    settings.policy.validate()?;
    check_templates(env, &settings.policy)?;
    let backend = backend.clone();
    let x = normalize(x0, &env.schema, &env.imputer)?;

    let mut run = Runner {
        env,
        settings,
        backend,
        belief: BeliefState::new(x),
        actions: Vec::new(),
        llm_up: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut policy_steps = Vec::new();
    let budget = &settings.budget;

    let (status, error_index) = loop {
        if Counters::of_actions(&run.actions).steps >= budget.max_steps {
            break (TerminalStatus::BudgetExhausted, None);
        }
        let action = match &settings.policy {
            DispatchPolicy::Learned { params } => {
                let mask = admissible(&run.belief, budget, run.caps());
                let features = featurize_state(&run.belief, budget);
                let probs = action_distribution(params, &features, &mask)?;
                let slot = if settings.explore {
                    sample(&probs, &mask, &mut rng)
                } else {
                    match dispatch(&run.belief, &settings.policy, &settings.conflict, budget, run.caps())? {
                        Action::CallTree => 0,
                        Action::CallLlm { .. } => 1,
                        Action::CallTool { .. } => 2,
                        _ => 3,
                    }
                };
                policy_steps.push(PolicyStep {
                    features,
                    mask,
                    action: slot,
                });
                policy_action(slot, &run.belief, &settings.conflict)
            }
            policy => match dispatch(&run.belief, policy, &settings.conflict, budget, run.caps()) {
                Ok(a) => a,
                Err(OrchestratorError::NoAdmissibleAction) => break (TerminalStatus::BudgetExhausted, None),
                Err(e) => return Err(e),
            },
        };
        match run.execute(action) {
            Flow::Finalized => break (TerminalStatus::Answered, None),
            Flow::Fatal(i) => break (TerminalStatus::Error, Some(i)),
            Flow::Continue => {}
        }
        if settings.auto_finalize {
            if Counters::of_actions(&run.actions).steps >= budget.max_steps {
                break (TerminalStatus::BudgetExhausted, None);
            }
            run.execute(Action::Finalize { answer: String::new() });
            break (TerminalStatus::Answered, None);
        }
    };

    let answer = match status {
        TerminalStatus::Answered => match run.actions.last() {
            Some(Action::Finalize { answer }) => Some(answer.clone()),
            _ => None,
        },
        _ => None,
    };
    let transcript = EpisodeTranscript {
        format: TRANSCRIPT_FORMAT.into(),
        seed: settings.seed,
        schema_digest: env.schema.digest(),
        counters: Counters::of_actions(&run.actions),
        belief: run.belief,
        actions: run.actions,
        answer,
        terminal_status: status,
        error_index,
        policy_steps,
    };
    debug_assert!(transcript.check().is_ok());
    Ok(transcript)
}

/// Draws a slot from `probs`; masked slots carry zero mass and are never drawn.
fn sample(probs: &[f64; 4], mask: &[bool; 4], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 3;
    for (a, p) in probs.iter().enumerate() {
        if !mask[a] || *p <= 0.0 {
            continue;
        }
        acc += p;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}
