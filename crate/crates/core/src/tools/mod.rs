//! The external tool interface 𝒜: a registry of named tools whose arguments
//! and results are checked against JSON Schema documents, plus the built-in
//! calculator, key-value knowledge base and tree consistency check.
//!
//! [`Registry::invoke`] never fails. Every problem comes back as a
//! [`ToolResult`] with an error status, so it can enter the belief state.

mod calc;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::tree::{check_consistency, Hypothesis, Model};
use crate::types::{FeatureValue, ToolQuery};

pub use calc::{calc_eval, parse as parse_expr, BinOp, CalcError, Expr};

pub const CALCULATOR: &str = "calculator";
pub const KB: &str = "kb";
pub const CONSISTENCY: &str = "tree_consistency";

const CALC_ARGS: &str = include_str!("../../schemas/calculator.args.json");
const CALC_RESULT: &str = include_str!("../../schemas/calculator.result.json");
const KB_ARGS: &str = include_str!("../../schemas/kb.args.json");
const KB_RESULT: &str = include_str!("../../schemas/kb.result.json");
const CONSISTENCY_ARGS: &str = include_str!("../../schemas/consistency.args.json");
const CONSISTENCY_RESULT: &str = include_str!("../../schemas/consistency.result.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("a tool named `{0}` is already registered")]
    DuplicateTool(String),
    #[error("tool `{tool}`: invalid JSON Schema: {message}")]
    InvalidSchema { tool: String, message: String },
    #[error("cannot load knowledge base: {0}")]
    KbLoad(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolErrorKind {
    UnknownTool,
    InvalidArguments,
    Timeout,
    HandlerError,
}

impl fmt::Display for ToolErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolErrorKind::UnknownTool => "unknown_tool",
            ToolErrorKind::InvalidArguments => "invalid_arguments",
            ToolErrorKind::Timeout => "timeout",
            ToolErrorKind::HandlerError => "handler_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ToolStatus {
    Ok { payload: Value },
    Error { kind: ToolErrorKind, message: String },
}

/// `z`: the answer to one dispatched query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub query_id: String,
    pub tool_name: String,
    pub status: ToolStatus,
    /// Logical ticks charged by the orchestrator clock.
    pub elapsed: u64,
}

impl ToolResult {
    pub fn is_ok(&self) -> bool {
        matches!(self.status, ToolStatus::Ok { .. })
    }

    pub fn payload(&self) -> Option<&Value> {
        match &self.status {
            ToolStatus::Ok { payload } => Some(payload),
            ToolStatus::Error { .. } => None,
        }
    }

    pub fn summary(&self) -> String {
        match &self.status {
            ToolStatus::Ok { payload } => format!("tool {} [{}] ok {payload}", self.tool_name, self.query_id),
            ToolStatus::Error { kind, message } => {
                format!("tool {} [{}] error {kind}: {message}", self.tool_name, self.query_id)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub argument_schema: Value,
    pub result_schema: Value,
    pub timeout_ms: u64,
}

pub type Handler = Arc<dyn Fn(&Value) -> Result<Value, String> + Send + Sync>;

struct Entry {
    spec: ToolSpec,
    args: jsonschema::Validator,
    result: jsonschema::Validator,
    handler: Handler,
}

/// Tools by name. Built once, then shared read-only across episodes.
#[derive(Default)]
pub struct Registry {
    tools: BTreeMap<String, Entry>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

fn compile(tool: &str, schema: &Value) -> Result<jsonschema::Validator, ToolError> {
    jsonschema::validator_for(schema).map_err(|e| ToolError::InvalidSchema {
        tool: tool.into(),
        message: e.to_string(),
    })
}

fn schema_doc(text: &str) -> Value {
    serde_json::from_str(text).expect("shipped schema documents are valid JSON")
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ToolSpec, handler: Handler) -> Result<(), ToolError> {
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        let args = compile(&spec.name, &spec.argument_schema)?;
        let result = compile(&spec.name, &spec.result_schema)?;
        self.tools.insert(
            spec.name.clone(),
            Entry {
                spec,
                args,
                result,
                handler,
            },
        );
        Ok(())
    }

    pub fn with(mut self, spec: ToolSpec, handler: Handler) -> Result<Self, ToolError> {
        self.register(spec, handler)?;
        Ok(self)
    }

    /// Calculator plus a knowledge base over `kb`.
    pub fn with_builtins(kb: KbStore) -> Self {
        let (cs, ch) = calculator_tool();
        let (ks, kh) = kb_tool(kb);
        Self::new()
            .with(cs, ch)
            .and_then(|r| r.with(ks, kh))
            .expect("built-in tools have distinct names and valid schemas")
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|e| &e.spec)
    }

    /// `(name, description)` pairs for prompt rosters.
    pub fn roster(&self) -> Vec<(String, String)> {
        self.tools
            .values()
            .map(|e| (e.spec.name.clone(), e.spec.description.clone()))
            .collect()
    }

    /// Runs `q`. Arguments are validated before the handler runs and the
    /// payload after; a handler that outlives its budget yields `timeout`.
    pub fn invoke(&self, q: &ToolQuery) -> ToolResult {
        let status = self.run(q);
        ToolResult {
            query_id: q.query_id.clone(),
            tool_name: q.tool_name.clone(),
            status,
            elapsed: 1,
        }
    }

    fn run(&self, q: &ToolQuery) -> ToolStatus {
        let err = |kind, message: String| ToolStatus::Error { kind, message };
        let Some(entry) = self.tools.get(&q.tool_name) else {
            return err(ToolErrorKind::UnknownTool, format!("no tool named `{}`", q.tool_name));
        };
        if let Err(e) = entry.args.validate(&q.arguments) {
            return err(ToolErrorKind::InvalidArguments, e.to_string());
        }
        let (tx, rx) = mpsc::channel();
        let handler = Arc::clone(&entry.handler);
        let args = q.arguments.clone();
        // A handler that overruns is abandoned; its thread finishes on its own.
        std::thread::spawn(move || {
            let _ = tx.send(handler(&args));
        });
        match rx.recv_timeout(Duration::from_millis(entry.spec.timeout_ms)) {
            Ok(Ok(payload)) => match entry.result.validate(&payload) {
                Ok(()) => ToolStatus::Ok { payload },
                Err(e) => err(ToolErrorKind::HandlerError, format!("result violates its schema: {e}")),
            },
            Ok(Err(message)) => err(ToolErrorKind::HandlerError, message),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                err(ToolErrorKind::Timeout, format!("exceeded {} ms", entry.spec.timeout_ms))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => err(ToolErrorKind::HandlerError, "handler panicked".into()),
        }
    }
}

pub fn calculator_tool() -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: CALCULATOR.into(),
        description: "evaluates an arithmetic expression with + - * / ^ and parentheses; args {\"expr\": string}"
            .into(),
        argument_schema: schema_doc(CALC_ARGS),
        result_schema: schema_doc(CALC_RESULT),
        timeout_ms: 1_000,
    };
    let handler: Handler = Arc::new(|args: &Value| {
        let expr = args["expr"].as_str().unwrap_or_default();
        calc_eval(expr).map(|v| json!({ "value": v })).map_err(|e| e.to_string())
    });
    (spec, handler)
}

/// Exact-match key-value store loaded from a single JSON object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KbStore {
    entries: BTreeMap<String, Value>,
}

impl KbStore {
    pub fn new(entries: BTreeMap<String, Value>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, ToolError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ToolError::KbLoad(e.to_string()))?;
        match v {
            Value::Object(o) => Ok(Self::new(o.into_iter().collect())),
            _ => Err(ToolError::KbLoad("the store must be a single JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path).map_err(|e| ToolError::KbLoad(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn lookup(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn kb_tool(store: KbStore) -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: KB.into(),
        description: "looks up a key in the knowledge base; args {\"key\": string}".into(),
        argument_schema: schema_doc(KB_ARGS),
        result_schema: schema_doc(KB_RESULT),
        timeout_ms: 1_000,
    };
    let store = Arc::new(store);
    let handler: Handler = Arc::new(move |args: &Value| {
        let key = args["key"].as_str().unwrap_or_default();
        Ok(match store.lookup(key) {
            Some(v) => json!({"found": true, "value": v}),
            None => json!({"found": false, "value": null}),
        })
    });
    (spec, handler)
}

/// Checks a partial feature assignment against the oracle tree.
pub fn consistency_tool(model: Arc<Model>) -> (ToolSpec, Handler) {
    let spec = ToolSpec {
        name: CONSISTENCY.into(),
        description: "checks whether a partial feature assignment entails a label under the decision tree".into(),
        argument_schema: schema_doc(CONSISTENCY_ARGS),
        result_schema: schema_doc(CONSISTENCY_RESULT),
        timeout_ms: 5_000,
    };
    let handler: Handler = Arc::new(move |args: &Value| {
        let assignment: BTreeMap<String, FeatureValue> =
            serde_json::from_value(args["assignment"].clone()).map_err(|e| e.to_string())?;
        let claimed_label = args["claimed_label"].as_str().unwrap_or_default().to_string();
        let tree = model.as_tree().ok_or("the consistency check requires a single decision tree")?;
        let report = check_consistency(
            tree,
            &Hypothesis {
                assignment,
                claimed_label,
            },
        )
        .map_err(|e| e.to_string())?;
        serde_json::to_value(report).map_err(|e| e.to_string())
    });
    (spec, handler)
}
