//! The tree-based reasoner: CART induction, random forests, prediction with
//! rule traces, what-if and counterfactual queries, and consistency checks.
//!
//! Splits are binary and axis-aligned. The left child always holds the rows
//! for which the split predicate is true.

mod cart;
mod io;
mod predict;
mod query;
mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FeatureValue, Schema, SchemaError, StructuredInput};

pub use cart::{train_cart, train_forest, ForestParams};
pub use io::{deserialize_model, serialize_model, MODEL_FORMAT};
pub use predict::{replay_trace, Model};
pub use query::{
    check_consistency, nearest_counterfactual, what_if, ConsistencyReport, ConsistencyStatus, Counterfactual,
    Hypothesis, TraceDiff, WhatIfResult, Witness,
};
pub use split::{best_split, impurity, impurity_from_counts, SplitOptions, GAIN_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("dataset must have m ≥ 1 rows")]
    EmptyDataset,
    #[error("dataset has {rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("row {row}: {source}")]
    InvalidRow { row: usize, source: SchemaError },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(SchemaError),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error("invalid cost weights: {0}")]
    InvalidCost(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("{0} requires a single decision tree")]
    NeedsTree(&'static str),
}

impl TreeError {
    pub fn kind(&self) -> &'static str {
        match self {
            TreeError::EmptyDataset | TreeError::LabelCount { .. } | TreeError::InvalidRow { .. } => "invalid_dataset",
            TreeError::SchemaMismatch(_) => "schema_mismatch",
            TreeError::UnknownFeature(_) => "unknown_feature",
            TreeError::UnknownLabel(_) => "unknown_label",
            TreeError::InvalidParams(_) => "invalid_params",
            TreeError::InvalidCost(_) => "invalid_cost",
            TreeError::MalformedModel(_) => "malformed_model",
            TreeError::NeedsTree(_) => "needs_tree",
        }
    }
}

/// Labeled training rows. Rows are complete and schema-conformant.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<StructuredInput>,
    labels: Vec<usize>,
    // column-major encoding used by the split search
    columns: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new<S: AsRef<str>>(schema: Schema, rows: Vec<StructuredInput>, labels: &[S]) -> Result<Self, TreeError> {
        if rows.is_empty() {
            return Err(TreeError::EmptyDataset);
        }
        if rows.len() != labels.len() {
            return Err(TreeError::LabelCount {
                rows: rows.len(),
                labels: labels.len(),
            });
        }
        for (i, r) in rows.iter().enumerate() {
            schema
                .check_complete(r)
                .map_err(|source| TreeError::InvalidRow { row: i, source })?;
        }
        let labels = labels
            .iter()
            .map(|l| {
                schema
                    .label_index(l.as_ref())
                    .map_err(|_| TreeError::UnknownLabel(l.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let columns = (0..schema.len())
            .map(|j| rows.iter().map(|r| schema.encode(j, &r.features[j])).collect())
            .collect();
        Ok(Self {
            schema,
            rows,
            labels,
            columns,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[StructuredInput] {
        &self.rows
    }

    /// Label indices into the schema's label vocabulary.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> Vec<&str> {
        self.labels.iter().map(|&l| self.schema.labels()[l].as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub(crate) fn column(&self, feature: usize) -> &[f64] {
        &self.columns[feature]
    }

    /// Observed `[min, max]` of every numeric feature.
    pub(crate) fn numeric_ranges(&self) -> Vec<Option<[f64; 2]>> {
        self.schema
            .features()
            .iter()
            .enumerate()
            .map(|(j, f)| {
                (f.kind == crate::types::FeatureKind::Numeric).then(|| {
                    let col = &self.columns[j];
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    [lo, hi]
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Gini,
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub criterion: Criterion,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub min_split_gain: f64,
    pub rng_seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            criterion: Criterion::Gini,
            max_depth: 8,
            min_leaf: 1,
            min_split_gain: 0.0,
            rng_seed: 0,
        }
    }
}

impl TrainParams {
    pub fn with_max_depth(mut self, max_depth: usize) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        if self.max_depth < 1 {
            return Err(TreeError::InvalidParams("max_depth ≥ 1".into()));
        }
        if self.min_leaf < 1 {
            return Err(TreeError::InvalidParams("min_leaf ≥ 1".into()));
        }
        if !(self.min_split_gain.is_finite() && self.min_split_gain >= 0.0) {
            return Err(TreeError::InvalidParams("min_split_gain must be a finite nonnegative real".into()));
        }
        Ok(())
    }
}

/// The test applied at an internal node. True sends the row left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SplitTest {
    NumericLe { threshold: f64 },
    CategoricalIn { categories: Vec<String> },
    BooleanIs { value: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPredicate {
    pub feature: usize,
    pub test: SplitTest,
}

impl SplitPredicate {
    /// Evaluates the predicate; `None` when the value has the wrong kind.
    pub fn evaluate(&self, value: &FeatureValue) -> Option<bool> {
        match (&self.test, value) {
            (SplitTest::NumericLe { threshold }, FeatureValue::Numeric(v)) => Some(*v <= *threshold),
            (SplitTest::CategoricalIn { categories }, FeatureValue::Categorical(s)) => {
                Some(categories.iter().any(|c| c == s))
            }
            (SplitTest::BooleanIs { value: want }, FeatureValue::Boolean(b)) => Some(b == want),
            _ => None,
        }
    }

    /// e.g. `hr ≤ 5.5`, `color ∈ {red}`, `fever = true`.
    pub fn render(&self, feature_name: &str) -> String {
        match &self.test {
            SplitTest::NumericLe { threshold } => format!("{feature_name} ≤ {threshold}"),
            SplitTest::CategoricalIn { categories } => format!("{feature_name} ∈ {{{}}}", categories.join(", ")),
            SplitTest::BooleanIs { value } => format!("{feature_name} = {value}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Internal {
        split: SplitPredicate,
        left: usize,
        right: usize,
    },
    Leaf {
        distribution: Vec<f64>,
        n_train: usize,
    },
}

/// Majority label index of a distribution, ties broken by vocabulary order.
pub(crate) fn argmax(distribution: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in distribution.iter().enumerate() {
        if p > distribution[best] {
            best = i;
        }
    }
    best
}

/// A trained classification tree stored as a node arena.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    schema: Schema,
    params: TrainParams,
    nodes: Vec<Node>,
    root: usize,
    feature_ranges: Vec<Option<[f64; 2]>>,
}

impl DecisionTree {
    /// Assembles a tree from parts, checking every structural invariant.
    pub fn from_parts(
        schema: Schema,
        params: TrainParams,
        nodes: Vec<Node>,
        root: usize,
        feature_ranges: Vec<Option<[f64; 2]>>,
    ) -> Result<Self, TreeError> {
        let tree = Self {
            schema,
            params,
            nodes,
            root,
            feature_ranges,
        };
        io::validate_tree(&tree)?;
        Ok(tree)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn params(&self) -> &TrainParams {
        &self.params
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn feature_ranges(&self) -> &[Option<[f64; 2]>] {
        &self.feature_ranges
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, Node::Leaf { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_ids().len()
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        let mut stack = vec![(self.root, 0usize)];
        let mut max = 0;
        while let Some((id, d)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { .. } => max = max.max(d),
                Node::Internal { left, right, .. } => {
                    stack.push((*left, d + 1));
                    stack.push((*right, d + 1));
                }
            }
        }
        max
    }

    /// Majority label of the leaf `id`, or `None` for internal nodes.
    pub fn leaf_label(&self, id: usize) -> Option<&str> {
        match self.nodes.get(id)? {
            Node::Leaf { distribution, .. } => Some(self.schema.labels()[argmax(distribution)].as_str()),
            Node::Internal { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub node_id: usize,
    pub feature_index: usize,
    pub feature: String,
    pub predicate: SplitTest,
    pub rendered: String,
    pub observed: FeatureValue,
    pub branch: Branch,
}

/// The ordered predicate evaluations from the root to `leaf_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTrace {
    pub steps: Vec<TraceStep>,
    pub leaf_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Derivation {
    Tree(RuleTrace),
    Forest {
        traces: Vec<RuleTrace>,
        /// Votes per label, in vocabulary order.
        votes: Vec<usize>,
    },
}

/// `y_tree`: outcome, confidence and the derivation that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicVerdict {
    pub outcome: String,
    pub confidence: f64,
    pub derivation: Derivation,
}

impl SymbolicVerdict {
    /// The single-tree trace, if this verdict came from one tree.
    pub fn trace(&self) -> Option<&RuleTrace> {
        match &self.derivation {
            Derivation::Tree(t) => Some(t),
            Derivation::Forest { .. } => None,
        }
    }

    pub fn traces(&self) -> Vec<&RuleTrace> {
        match &self.derivation {
            Derivation::Tree(t) => vec![t],
            Derivation::Forest { traces, .. } => traces.iter().collect(),
        }
    }

    /// Step count of the single-tree trace, or the longest member trace.
    pub fn trace_len(&self) -> usize {
        self.traces().iter().map(|t| t.steps.len()).max().unwrap_or(0)
    }
}

/// A bagged ensemble of trees sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<DecisionTree>,
    seeds: Vec<u64>,
    feature_subsample_count: usize,
    bootstrap: bool,
    master_seed: u64,
}

impl Forest {
    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn feature_subsample_count(&self) -> usize {
        self.feature_subsample_count
    }

    pub fn bootstrap(&self) -> bool {
        self.bootstrap
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn schema(&self) -> &Schema {
        self.trees[0].schema()
    }
}
