//! Random episode settings and the laws every finished transcript obeys.

use std::collections::BTreeMap;
use std::sync::Arc;

use arbor_core::belief::BeliefState;
use arbor_core::llm::{BackendConfig, Pattern, ScriptRule, ScriptedConfig};
use arbor_core::orchestrator::{
    export_trace, import_transcript, run_episode, BackendFailure, Budget, Condition, ConflictPolicy, ConflictRule,
    DispatchPolicy, DispatchRule, EpisodeEnv, EpisodeSettings, EpisodeTranscript, Step, TraceFormat,
};
use arbor_core::perception::{to_record, RawRecord};
use arbor_core::policy::PolicyParams;
use arbor_core::tools::{consistency_tool, KbStore, Registry};
use arbor_core::tree::{train_cart, Model, TrainParams};
use arbor_core::types::Action;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use super::{random_dataset, rng};

struct Fixture {
    env: EpisodeEnv,
    records: Vec<RawRecord>,
}

fn fixture(r: &mut StdRng) -> Fixture {
    let k = r.gen_range(1..=4);
    let m = r.gen_range(2..=40);
    let ds = random_dataset(r, m, k, 2);
    let model = Arc::new(Model::Tree(train_cart(&ds, &TrainParams::default()).unwrap()));
    let kb = KbStore::new(BTreeMap::from([
        ("r0".to_string(), json!("L0")),
        ("k".to_string(), json!(3)),
    ]));
    let mut registry = Registry::with_builtins(kb);
    let (spec, handler) = consistency_tool(Arc::clone(&model));
    registry.register(spec, handler).unwrap();
    let env = EpisodeEnv::new(ds.schema().clone(), Some(model), Arc::new(registry)).unwrap();
    let records = ds.rows().iter().map(|x| to_record(x, ds.schema())).collect();
    Fixture { env, records }
}

const REPLIES: [&str; 12] = [
    "ANSWER: L0 | RATIONALE: guess",
    "ANSWER: L1",
    "ANSWER: 7",
    r#"TOOL: calculator | ARGS: {"expr":"2+3*4"}"#,
    r#"TOOL: calculator | ARGS: {"expr":"1/0"}"#,
    r#"TOOL: kb | ARGS: {"key":"r0"}"#,
    r#"TOOL: kb | ARGS: {"nokey":1}"#,
    r#"TOOL: missing_tool | ARGS: {}"#,
    r#"CHECK: {"f0": 1.0} | CLAIM: L0"#,
    "PLAN: 1. look 2. answer",
    "I think it is probably L0.",
    "",
];

const PROMPT_MARKERS: [&str; 6] = ["tool calculator", "tool kb", "outcome L0", "outcome L1", "PLAN", "source:"];

fn random_backend(r: &mut StdRng) -> BackendConfig {
    let rules: Vec<ScriptRule> = (0..r.gen_range(0..5))
        .map(|_| ScriptRule {
            pattern: Pattern::Substring(PROMPT_MARKERS.choose(r).unwrap().to_string()),
            response: REPLIES.choose(r).unwrap().to_string(),
        })
        .collect();
    // no default sometimes, so unmatched prompts fail the backend
    let default = (rules.is_empty() || r.gen_bool(0.8)).then(|| REPLIES.choose(r).unwrap().to_string());
    BackendConfig::Scripted(ScriptedConfig { rules, default })
}

fn random_policy(r: &mut StdRng) -> DispatchPolicy {
    if r.gen_bool(0.3) {
        let mut params = PolicyParams::zeros();
        for w in params.weights.iter_mut().flatten() {
            *w = r.gen_range(-3.0..3.0);
        }
        return DispatchPolicy::Learned { params };
    }
    let conditions = [
        Condition::NoTreeVerdict,
        Condition::NoLlmResponse,
        Condition::LlmMalformedRetry,
        Condition::ToolPending,
        Condition::LlmFollowUpDue,
        Condition::Disagreement,
        Condition::Always,
    ];
    let templates = ["default", "explain_tree", "decompose"];
    let mut rules: Vec<DispatchRule> = (0..r.gen_range(0..7))
        .map(|_| {
            let then = match r.gen_range(0..5) {
                0 => Step::CallTree,
                1 => Step::CallLlm {
                    template_id: templates.choose(r).unwrap().to_string(),
                },
                2 => Step::CallTool,
                3 => Step::ResolveConflict,
                _ => Step::Finalize,
            };
            DispatchRule::new(*conditions.choose(r).unwrap(), then)
        })
        .collect();
    rules.push(DispatchRule::new(Condition::Always, Step::Finalize));
    DispatchPolicy::RuleBased { rules }
}

fn random_settings(r: &mut StdRng) -> EpisodeSettings {
    EpisodeSettings {
        policy: random_policy(r),
        budget: Budget {
            max_steps: r.gen_range(1..=10),
            max_tool_calls: r.gen_range(1..=3),
            max_llm_calls: r.gen_range(1..=4),
        },
        conflict: if r.gen_bool(0.5) {
            ConflictPolicy::default()
        } else {
            ConflictPolicy::new(vec![
                ConflictRule::AgreementPasses,
                ConflictRule::EscalateToTool { tool_name: "kb".into() },
                ConflictRule::LlmFallback,
            ])
            .unwrap()
        },
        backend: random_backend(r),
        seed: r.gen(),
        auto_finalize: r.gen_bool(0.2),
        explore: r.gen_bool(0.5),
        on_backend_failure: if r.gen_bool(0.5) { BackendFailure::Abort } else { BackendFailure::Continue },
        task_instruction: None,
    }
}

/// Every law a finished transcript must satisfy; `Err` names the first broken one.
pub fn check_laws(t: &EpisodeTranscript, budget: &Budget) -> Result<(), String> {
    t.check().map_err(|e| e.to_string())?;
    let events = t.belief.events();
    let prov = t.belief.provenance();
    if events.len() != prov.len() {
        return Err("events and provenance differ in length".into());
    }
    if t.actions.len() != events.len() {
        return Err(format!("{} actions but {} events", t.actions.len(), events.len()));
    }
    for (i, (e, p)) in events.iter().zip(prov).enumerate() {
        if p.step_index != i as u64 {
            return Err(format!("step_index {} at position {i}", p.step_index));
        }
        if p.payload_digest != e.digest() {
            return Err(format!("digest mismatch at {i}"));
        }
        if i > 0 && p.timestamp <= prov[i - 1].timestamp {
            return Err(format!("clock did not advance at {i}"));
        }
        if p.action != t.actions[i] {
            return Err(format!("action mismatch at {i}"));
        }
    }
    // rebuild by single appends: every earlier entry stays byte-identical
    let mut c = BeliefState::new(t.belief.input().clone());
    for (i, (e, p)) in events.iter().zip(prov).enumerate() {
        let before: Vec<String> = c.events().iter().map(|e| e.digest()).collect();
        c = arbor_core::belief::update_belief(c, e.clone(), p.actor, p.action.clone());
        let after: Vec<String> = c.events().iter().map(|e| e.digest()).collect();
        if after.len() != i + 1 || after[..i] != before[..] {
            return Err(format!("append {i} disturbed earlier entries"));
        }
    }
    let folded = BeliefState::fold(
        t.belief.input().clone(),
        events.iter().cloned().zip(prov).map(|(e, p)| (e, p.actor, p.action.clone())),
    );
    if events != folded.events() || prov.len() != folded.provenance().len() {
        return Err("fold differs from the transcript belief".into());
    }
    let c = &t.counters;
    if c.steps > budget.max_steps || c.tool_calls > budget.max_tool_calls || c.llm_calls > budget.max_llm_calls {
        return Err(format!("counters {c:?} exceed budget {budget:?}"));
    }
    for a in &t.actions {
        if let Action::Finalize { answer } = a {
            if answer.is_empty() {
                return Err("empty Finalize answer".into());
            }
        }
    }
    Ok(())
}

/// Runs `n` random episodes from `seed`; returns how many ran and the first
/// violation.
pub fn fuzz_episodes(seed: u64, n: usize) -> (usize, Result<(), String>) {
    let mut r = rng(seed);
    let mut ran = 0;
    while ran < n {
        let f = fixture(&mut r);
        for _ in 0..10 {
            let settings = random_settings(&mut r);
            let record = f.records.choose(&mut r).unwrap();
            let t = match run_episode(record, &f.env, &settings) {
                Ok(t) => t,
                Err(e) => return (ran, Err(format!("episode refused to run: {e}"))),
            };
            if let Err(e) = check_laws(&t, &settings.budget) {
                return (ran, Err(e));
            }
            let again = run_episode(record, &f.env, &settings).unwrap();
            if again.to_json() != t.to_json() {
                return (ran, Err("rerun differs".into()));
            }
            let back = import_transcript(&export_trace(&t, TraceFormat::Json)).unwrap();
            if back != t {
                return (ran, Err("json export does not round-trip".into()));
            }
            ran += 1;
        }
    }
    (ran, Ok(()))
}

