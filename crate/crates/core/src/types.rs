//! Shared domain types: schemas, typed feature values, structured inputs,
//! the action vocabulary, and the content digest used for provenance.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Errors raised when a schema or an input does not conform.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),
    #[error("feature `{0}`: vocabulary must be present iff kind is categorical")]
    VocabularyKind(String),
    #[error("feature `{0}`: vocabulary must be non-empty and free of duplicates")]
    BadVocabulary(String),
    #[error("label vocabulary must be non-empty and free of duplicates")]
    BadLabelVocabulary,
    #[error("expected {expected} features, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("feature `{feature}`: expected {expected} value, got {got}")]
    TypeMismatch {
        feature: String,
        expected: FeatureKind,
        got: String,
    },
    #[error("feature `{feature}`: unknown category `{symbol}`")]
    UnknownCategory { feature: String, symbol: String },
    #[error("feature `{0}` is missing")]
    MissingFeature(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("feature `{0}`: numeric value is not finite")]
    NonFinite(String),
}

impl SchemaError {
    /// Machine-readable error kind, shared with the service error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            SchemaError::DuplicateFeature(_) => "duplicate_feature",
            SchemaError::VocabularyKind(_) | SchemaError::BadVocabulary(_) => "bad_vocabulary",
            SchemaError::BadLabelVocabulary => "bad_label_vocabulary",
            SchemaError::Arity { .. } => "schema_mismatch",
            SchemaError::TypeMismatch { .. } => "type_mismatch",
            SchemaError::UnknownCategory { .. } => "unknown_category",
            SchemaError::MissingFeature(_) => "missing_feature",
            SchemaError::UnknownFeature(_) => "unknown_feature",
            SchemaError::UnknownLabel(_) => "unknown_label",
            SchemaError::NonFinite(_) => "type_mismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
    Boolean,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Numeric => "numeric",
            FeatureKind::Categorical => "categorical",
            FeatureKind::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub vocabulary: Option<Vec<String>>,
}

impl FeatureDef {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
            vocabulary: None,
        }
    }

    pub fn boolean(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Boolean,
            vocabulary: None,
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, vocabulary: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            vocabulary: Some(vocabulary.into_iter().map(Into::into).collect()),
        }
    }

    /// Index of `symbol` in the declared vocabulary.
    pub fn category_index(&self, symbol: &str) -> Option<usize> {
        self.vocabulary.as_ref()?.iter().position(|s| s == symbol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    pub vocabulary: Vec<String>,
}

/// Ordered feature list plus a classification label. The position of a
/// feature in `features` is its index everywhere downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct Schema {
    features: Vec<FeatureDef>,
    label: LabelDef,
}

#[derive(Deserialize)]
struct RawSchema {
    features: Vec<FeatureDef>,
    label: LabelDef,
}

impl TryFrom<RawSchema> for Schema {
    type Error = SchemaError;

    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        Schema::new(raw.features, raw.label)
    }
}

fn distinct_non_empty(symbols: &[String]) -> bool {
    !symbols.is_empty() && symbols.iter().collect::<BTreeSet<_>>().len() == symbols.len()
}

impl Schema {
    pub fn new(features: Vec<FeatureDef>, label: LabelDef) -> Result<Self, SchemaError> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateFeature(f.name.clone()));
            }
            match (&f.kind, &f.vocabulary) {
                (FeatureKind::Categorical, Some(v)) => {
                    if !distinct_non_empty(v) {
                        return Err(SchemaError::BadVocabulary(f.name.clone()));
                    }
                }
                (FeatureKind::Categorical, None) | (_, Some(_)) => {
                    return Err(SchemaError::VocabularyKind(f.name.clone()))
                }
                _ => {}
            }
        }
        if !distinct_non_empty(&label.vocabulary) {
            return Err(SchemaError::BadLabelVocabulary);
        }
        Ok(Self { features, label })
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn feature(&self, index: usize) -> Option<&FeatureDef> {
        self.features.get(index)
    }

    pub fn label(&self) -> &LabelDef {
        &self.label
    }

    pub fn labels(&self) -> &[String] {
        &self.label.vocabulary
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn label_index(&self, label: &str) -> Result<usize, SchemaError> {
        self.label
            .vocabulary
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| SchemaError::UnknownLabel(label.to_string()))
    }

    pub fn digest(&self) -> String {
        digest(canonical_json(self).as_bytes())
    }

    /// Checks that `value` may occupy slot `index`. `Missing` is accepted here;
    /// completeness is checked by [`Schema::check_complete`].
    pub fn check_value(&self, index: usize, value: &FeatureValue) -> Result<(), SchemaError> {
        let def = &self.features[index];
        match (def.kind, value) {
            (_, FeatureValue::Missing) => Ok(()),
            (FeatureKind::Numeric, FeatureValue::Numeric(v)) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err(SchemaError::NonFinite(def.name.clone()))
                }
            }
            (FeatureKind::Boolean, FeatureValue::Boolean(_)) => Ok(()),
            (FeatureKind::Categorical, FeatureValue::Categorical(s)) => {
                if def.category_index(s).is_some() {
                    Ok(())
                } else {
                    Err(SchemaError::UnknownCategory {
                        feature: def.name.clone(),
                        symbol: s.clone(),
                    })
                }
            }
            (kind, other) => Err(SchemaError::TypeMismatch {
                feature: def.name.clone(),
                expected: kind,
                got: other.kind_name().to_string(),
            }),
        }
    }

    /// Validates an input: arity, per-slot kinds, and no missing values.
    pub fn check_complete(&self, input: &StructuredInput) -> Result<(), SchemaError> {
        if input.features.len() != self.features.len() {
            return Err(SchemaError::Arity {
                expected: self.features.len(),
                got: input.features.len(),
            });
        }
        for (i, v) in input.features.iter().enumerate() {
            if v.is_missing() {
                return Err(SchemaError::MissingFeature(self.features[i].name.clone()));
            }
            self.check_value(i, v)?;
        }
        Ok(())
    }

    /// Encodes a conforming value as a real: numerics as-is, booleans as 0/1,
    /// categories as their vocabulary index.
    pub fn encode(&self, index: usize, value: &FeatureValue) -> f64 {
        match value {
            FeatureValue::Numeric(v) => *v,
            FeatureValue::Boolean(b) => f64::from(u8::from(*b)),
            FeatureValue::Categorical(s) => self.features[index].category_index(s).unwrap_or(usize::MAX) as f64,
            FeatureValue::Missing => f64::NAN,
        }
    }
}

/// A single typed feature slot. Serialized untagged: numbers, strings,
/// booleans and `null` map directly onto the JSON scalar kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Numeric(f64),
    Boolean(bool),
    Categorical(String),
    Missing,
}

impl FeatureValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, FeatureValue::Missing)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            FeatureValue::Numeric(_) => "numeric",
            FeatureValue::Boolean(_) => "boolean",
            FeatureValue::Categorical(_) => "categorical",
            FeatureValue::Missing => "missing",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FeatureValue::Numeric(v) => Some(*v),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Numeric(v) => write!(f, "{v}"),
            FeatureValue::Boolean(b) => write!(f, "{b}"),
            FeatureValue::Categorical(s) => f.write_str(s),
            FeatureValue::Missing => f.write_str("?"),
        }
    }
}

/// The perception output `x`: one value per schema slot, optional free text,
/// and the identifier of the raw record it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredInput {
    pub features: Vec<FeatureValue>,
    pub text_abstraction: Option<String>,
    pub source_id: String,
}

impl StructuredInput {
    pub fn new(features: Vec<FeatureValue>, source_id: impl Into<String>) -> Self {
        Self {
            features,
            text_abstraction: None,
            source_id: source_id.into(),
        }
    }
}

/// A formalized query addressed to a registered tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolQuery {
    pub tool_name: String,
    pub arguments: serde_json::Value,
    pub query_id: String,
}

/// The orchestrator's action vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    CallTree,
    CallLlm { template_id: String },
    CallTool { query: ToolQuery },
    ResolveConflict,
    Finalize { answer: String },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::CallTree => "call_tree",
            Action::CallLlm { .. } => "call_llm",
            Action::CallTool { .. } => "call_tool",
            Action::ResolveConflict => "resolve_conflict",
            Action::Finalize { .. } => "finalize",
        }
    }
}

/// Who produced a belief event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Perception,
    Tree,
    Llm,
    Tool,
    Orchestrator,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Actor::Perception => "perception",
            Actor::Tree => "tree",
            Actor::Llm => "llm",
            Actor::Tool => "tool",
            Actor::Orchestrator => "orchestrator",
        })
    }
}

/// Field-name-sorted JSON with explicit nulls.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    // serde_json's Map is a BTreeMap here, so going through Value sorts keys.
    let v = serde_json::to_value(value).expect("domain types always serialize");
    serde_json::to_string(&v).expect("a json value always serializes")
}

/// SHA-256 of `payload`, lowercase hex.
pub fn digest(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}
