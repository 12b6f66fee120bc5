//! Operations shared by the CLI and the HTTP handlers. Both surfaces call
//! these functions with the same inputs, so their payloads agree byte for
//! byte.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use arbor_core::belief::BeliefEvent;
use arbor_core::llm::verbalize_verdict;
use arbor_core::orchestrator::{run_episode, EpisodeEnv, EpisodeSettings, EpisodeTranscript, TerminalStatus};
use arbor_core::perception::{
    coerce, fit_imputer, labeled_dataset, normalize, record_from_value, records_from_csv, records_from_json_lines,
    FittedImputer, ImputationPolicy, RawRecord,
};
use arbor_core::tools::{KbStore, Registry};
use arbor_core::tree::{
    train_cart, train_forest, what_if, ForestParams, Model, SymbolicVerdict, TrainParams, TreeError, WhatIfResult,
};
use arbor_core::types::{Actor, FeatureValue, Schema, StructuredInput};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Class, OpError};

/// Training input: a schema, labeled rows (inline or from a file) and
/// hyper-parameters. Rows carry the label under the schema's label name.
#[derive(Debug, Clone, Deserialize)]
pub struct TrainRequest {
    pub schema: Schema,
    #[serde(default)]
    pub rows: Option<Vec<Value>>,
    /// A `.csv` or `.jsonl` file readable by the process.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub params: TrainParams,
    #[serde(default)]
    pub forest: Option<ForestParams>,
    /// Fills missing training values; without it incomplete rows are rejected.
    #[serde(default)]
    pub imputation: Option<ImputationPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub kind: String,
    pub depth: usize,
    pub leaf_count: usize,
    /// `None` for imported models.
    pub training_accuracy: Option<f64>,
    pub rows: Option<usize>,
    pub schema_digest: String,
}

pub fn load_records(path: &str) -> Result<Vec<RawRecord>, OpError> {
    let text = std::fs::read_to_string(path).map_err(|e| OpError::io(path, e))?;
    let records = match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("csv") => records_from_csv(text.as_bytes())?,
        Some("jsonl") | Some("ndjson") => records_from_json_lines(&text)?,
        Some("json") => {
            let v: Value = serde_json::from_str(&text).map_err(|e| OpError::bad_request("malformed_input", e.to_string()))?;
            match v {
                Value::Array(items) => items.iter().map(record_from_value).collect::<Result<_, _>>()?,
                other => vec![record_from_value(&other)?],
            }
        }
        _ => {
            return Err(OpError::bad_request(
                "unsupported_format",
                format!("{path}: expected a .csv, .jsonl or .json file"),
            ))
        }
    };
    Ok(records)
}

pub fn request_records(req: &TrainRequest) -> Result<Vec<RawRecord>, OpError> {
    match (&req.rows, &req.path) {
        (Some(rows), None) => Ok(rows.iter().map(record_from_value).collect::<Result<_, _>>()?),
        (None, Some(path)) => load_records(path),
        _ => Err(OpError::bad_request("invalid_request", "give exactly one of `rows` and `path`")),
    }
}

/// Trains a tree (or a forest, when `forest` is set) and reports how well it
/// fits its own training rows.
pub fn train_model(req: &TrainRequest, records: &[RawRecord]) -> Result<(Model, TrainingSummary), OpError> {
    if records.is_empty() {
        return Err(TreeError::EmptyDataset.into());
    }
    let imputer = match &req.imputation {
        Some(policy) => {
            let unlabeled: Vec<RawRecord> = records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.fields.remove(&req.schema.label().name);
                    r
                })
                .collect();
            fit_imputer(&unlabeled, &req.schema, policy.clone())?
        }
        None => FittedImputer::reject_all(&req.schema),
    };
    let ds = labeled_dataset(records, &req.schema, &imputer)?;
    let model = match &req.forest {
        None => Model::Tree(train_cart(&ds, &req.params)?),
        Some(f) => Model::Forest(train_forest(&ds, &req.params, f)?),
    };
    let correct = ds
        .rows()
        .iter()
        .zip(ds.labels())
        .map(|(x, &l)| model.predict(x).map(|v| v.outcome == ds.schema().labels()[l]))
        .collect::<Result<Vec<bool>, TreeError>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    let mut summary = summarize(&model);
    summary.training_accuracy = Some(correct as f64 / ds.len() as f64);
    summary.rows = Some(ds.len());
    Ok((model, summary))
}

pub fn summarize(model: &Model) -> TrainingSummary {
    TrainingSummary {
        kind: model.kind().into(),
        depth: model.depth(),
        leaf_count: model.leaf_count(),
        training_accuracy: None,
        rows: None,
        schema_digest: model.schema().digest(),
    }
}

/// The episode environment for queries against `model`: built-in tools plus
/// the tree-consistency checker when the model is a single tree.
pub fn query_env(model: Arc<Model>) -> Result<EpisodeEnv, OpError> {
    let mut registry = Registry::with_builtins(KbStore::default());
    if model.as_tree().is_some() {
        let (spec, handler) = arbor_core::tools::consistency_tool(Arc::clone(&model));
        registry
            .register(spec, handler)
            .map_err(|e| OpError::new(Class::Internal, "tool_registry", e.to_string()))?;
    }
    Ok(EpisodeEnv::new(model.schema().clone(), Some(model), Arc::new(registry))?)
}

/// Applies a JSON object of overrides on top of `base`, key by key and
/// recursively for nested objects.
pub fn merge_settings(base: &EpisodeSettings, overrides: &Value) -> Result<EpisodeSettings, OpError> {
    fn merge(into: &mut Value, from: &Value) {
        match (into, from) {
            (Value::Object(a), Value::Object(b)) => {
                for (k, v) in b {
                    match a.get_mut(k) {
                        // Tagged enums switch variant wholesale.
                        Some(slot) if slot.is_object() && v.is_object() && !is_tagged(slot, v) => merge(slot, v),
                        _ => {
                            a.insert(k.clone(), v.clone());
                        }
                    }
                }
            }
            (slot, v) => *slot = v.clone(),
        }
    }
    fn is_tagged(a: &Value, b: &Value) -> bool {
        ["kind", "do", "rule", "node"].iter().any(|t| a.get(t).is_some() || b.get(t).is_some())
    }
    if overrides.is_null() {
        return Ok(base.clone());
    }
    if !overrides.is_object() {
        return Err(OpError::bad_request("invalid_config", "episode settings must be a JSON object"));
    }
    let mut v = serde_json::to_value(base).expect("settings serialize");
    merge(&mut v, overrides);
    serde_json::from_value(v).map_err(|e| OpError::bad_request("invalid_config", e.to_string()))
}

/// The tree verdict of an episode with its trace rendered in prose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictView {
    pub verdict: SymbolicVerdict,
    pub trace_length: usize,
    pub verbalization: String,
}

pub fn verdict_view(verdict: &SymbolicVerdict, schema: &Schema) -> VerdictView {
    VerdictView {
        verdict: verdict.clone(),
        trace_length: verdict.trace_len(),
        verbalization: verbalize_verdict(verdict, schema).unwrap_or_else(|e| format!("(no verbalization: {e})")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub digest: String,
    pub terminal_status: TerminalStatus,
    pub steps: u32,
    pub tool_calls: u32,
    pub llm_calls: u32,
    pub events: usize,
    pub error_index: Option<u64>,
}

pub fn transcript_summary(t: &EpisodeTranscript) -> TranscriptSummary {
    TranscriptSummary {
        digest: t.digest(),
        terminal_status: t.terminal_status,
        steps: t.counters.steps,
        tool_calls: t.counters.tool_calls,
        llm_calls: t.counters.llm_calls,
        events: t.belief.len(),
        error_index: t.error_index,
    }
}

pub struct QueryOutcome {
    pub transcript: EpisodeTranscript,
    pub verdict: Option<VerdictView>,
}

pub fn run_query(model: Arc<Model>, record: &RawRecord, settings: &EpisodeSettings) -> Result<QueryOutcome, OpError> {
    let env = query_env(Arc::clone(&model))?;
    let transcript = run_episode(record, &env, settings)?;
    let verdict = transcript
        .belief
        .latest_tree_verdict()
        .map(|v| verdict_view(v, model.schema()));
    Ok(QueryOutcome { transcript, verdict })
}

/// The failure that ended an episode, when the language model caused it.
pub fn backend_failure(t: &EpisodeTranscript) -> Option<(String, String)> {
    let i = t.error_index? as usize;
    match t.belief.events().get(i)? {
        BeliefEvent::Failure(f) if f.actor == Actor::Llm => Some((f.kind.clone(), f.message.clone())),
        _ => None,
    }
}

/// Coerces JSON modification values against the model schema.
pub fn parse_modifications(schema: &Schema, mods: &BTreeMap<String, Value>) -> Result<BTreeMap<String, FeatureValue>, OpError> {
    mods.iter()
        .map(|(name, v)| {
            let i = schema
                .feature_index(name)
                .ok_or_else(|| OpError::new(Class::Unprocessable, "unknown_feature", format!("unknown feature `{name}`")))?;
            let value = coerce(schema, i, v).map_err(|e| OpError::new(Class::Unprocessable, e.kind(), e.to_string()))?;
            if value.is_missing() {
                return Err(OpError::new(
                    Class::Unprocessable,
                    "missing_feature",
                    format!("feature `{name}`: a modification needs a value"),
                ));
            }
            Ok((name.clone(), value))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfView {
    pub result: WhatIfResult,
    pub divergence_index: Option<usize>,
    pub outcome_changed: bool,
    pub before: VerdictView,
    pub after: VerdictView,
}

pub fn run_whatif(model: &Model, x: &StructuredInput, mods: &BTreeMap<String, Value>) -> Result<WhatIfView, OpError> {
    let mods = parse_modifications(model.schema(), mods)?;
    let result = what_if(model, x, &mods).map_err(|e| match e {
        TreeError::SchemaMismatch(_) | TreeError::UnknownFeature(_) => OpError::from(e),
        other => OpError::new(Class::Unprocessable, other.kind(), other.to_string()),
    })?;
    Ok(WhatIfView {
        divergence_index: result.divergence_index(),
        outcome_changed: result.before.outcome != result.after.outcome,
        before: verdict_view(&result.before, model.schema()),
        after: verdict_view(&result.after, model.schema()),
        result,
    })
}

/// Normalizes a standalone record for `model` (the CLI what-if path).
pub fn normalize_for(model: &Model, record: &RawRecord) -> Result<StructuredInput, OpError> {
    normalize(record, model.schema(), &FittedImputer::reject_all(model.schema()))
        .map_err(|e| OpError::new(Class::Unprocessable, e.kind(), e.to_string()))
}
