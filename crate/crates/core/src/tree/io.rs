//! Versioned model JSON. Every deserialization re-checks the structural
//! invariants and reports the first one violated.

use serde::{Deserialize, Serialize};

use crate::types::{canonical_json, FeatureKind, Schema};

use super::{DecisionTree, Forest, Model, Node, SplitTest, TrainParams, TreeError};

pub const MODEL_FORMAT: &str = "oracle-tree/1";

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Serialize, Deserialize)]
struct TreeBody {
    params: TrainParams,
    feature_ranges: Vec<Option<[f64; 2]>>,
    root: usize,
    nodes: Vec<Node>,
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    format: String,
    kind: String,
    schema: Schema,
    schema_digest: String,
    #[serde(flatten)]
    body: TreeBody,
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format: String,
    kind: String,
    schema: Schema,
    schema_digest: String,
    master_seed: u64,
    bootstrap: bool,
    feature_subsample_count: usize,
    seeds: Vec<u64>,
    trees: Vec<TreeBody>,
}

fn body(tree: &DecisionTree) -> TreeBody {
    TreeBody {
        params: tree.params.clone(),
        feature_ranges: tree.feature_ranges.clone(),
        root: tree.root,
        nodes: tree.nodes.clone(),
    }
}

/// Canonical JSON bytes of `model`.
pub fn serialize_model(model: &Model) -> Vec<u8> {
    let json = match model {
        Model::Tree(t) => canonical_json(&TreeFile {
            format: MODEL_FORMAT.into(),
            kind: "tree".into(),
            schema: t.schema.clone(),
            schema_digest: t.schema.digest(),
            body: body(t),
        }),
        Model::Forest(f) => canonical_json(&ForestFile {
            format: MODEL_FORMAT.into(),
            kind: "forest".into(),
            schema: f.schema().clone(),
            schema_digest: f.schema().digest(),
            master_seed: f.master_seed,
            bootstrap: f.bootstrap,
            feature_subsample_count: f.feature_subsample_count,
            seeds: f.seeds.clone(),
            trees: f.trees.iter().map(body).collect(),
        }),
    };
    json.into_bytes()
}

fn malformed(msg: impl Into<String>) -> TreeError {
    TreeError::MalformedModel(msg.into())
}

pub fn deserialize_model(bytes: &[u8]) -> Result<Model, TreeError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| malformed(format!("not valid JSON: {e}")))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(MODEL_FORMAT) => {}
        Some(other) => return Err(malformed(format!("format must be `{MODEL_FORMAT}`, got `{other}`"))),
        None => return Err(malformed("format field is missing")),
    }
    match value.get("kind").and_then(|v| v.as_str()) {
        Some("tree") => {
            let file: TreeFile = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            check_digest(&file.schema, &file.schema_digest)?;
            let tree = assemble(file.schema, file.body);
            validate_tree(&tree)?;
            Ok(Model::Tree(tree))
        }
        Some("forest") => {
            let file: ForestFile = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
            check_digest(&file.schema, &file.schema_digest)?;
            if file.trees.is_empty() {
                return Err(malformed("forest must hold n_trees ≥ 1"));
            }
            if file.seeds.len() != file.trees.len() {
                return Err(malformed("forest needs exactly one seed per tree"));
            }
            let k = file.schema.len();
            if file.feature_subsample_count < 1 || file.feature_subsample_count > k {
                return Err(malformed(format!("feature_subsample_count must lie in [1, {k}]")));
            }
            let trees = file
                .trees
                .into_iter()
                .enumerate()
                .map(|(i, b)| {
                    let tree = assemble(file.schema.clone(), b);
                    validate_tree(&tree).map_err(|e| match e {
                        TreeError::MalformedModel(m) => malformed(format!("tree {i}: {m}")),
                        other => other,
                    })?;
                    Ok(tree)
                })
                .collect::<Result<Vec<_>, TreeError>>()?;
            Ok(Model::Forest(Forest {
                trees,
                seeds: file.seeds,
                feature_subsample_count: file.feature_subsample_count,
                bootstrap: file.bootstrap,
                master_seed: file.master_seed,
            }))
        }
        Some(other) => Err(malformed(format!("kind must be `tree` or `forest`, got `{other}`"))),
        None => Err(malformed("kind field is missing")),
    }
}

fn assemble(schema: Schema, b: TreeBody) -> DecisionTree {
    DecisionTree {
        schema,
        params: b.params,
        nodes: b.nodes,
        root: b.root,
        feature_ranges: b.feature_ranges,
    }
}

fn check_digest(schema: &Schema, claimed: &str) -> Result<(), TreeError> {
    if schema.digest() != claimed {
        return Err(malformed("schema_digest does not match the embedded schema"));
    }
    Ok(())
}

/// Checks every structural invariant of a tree, in a fixed order.
pub(crate) fn validate_tree(tree: &DecisionTree) -> Result<(), TreeError> {
    tree.params
        .validate()
        .map_err(|e| malformed(format!("training params: {e}")))?;
    let n = tree.nodes.len();
    if n == 0 {
        return Err(malformed("tree has no nodes"));
    }
    if tree.root >= n {
        return Err(malformed(format!("root index {} out of range", tree.root)));
    }

    // binary tree shape: every node except the root has exactly one parent,
    // and every node is reachable from the root
    let mut parents = vec![0usize; n];
    for (id, node) in tree.nodes.iter().enumerate() {
        if let Node::Internal { left, right, .. } = node {
            for &c in [left, right] {
                if c >= n {
                    return Err(malformed(format!("node {id}: child index {c} out of range")));
                }
                parents[c] += 1;
            }
        }
    }
    if parents[tree.root] != 0 {
        return Err(malformed("root must have no parent"));
    }
    if let Some(id) = (0..n).find(|&i| i != tree.root && parents[i] != 1) {
        return Err(malformed(format!(
            "node {id} has {} parents; each non-root node needs exactly one",
            parents[id]
        )));
    }
    let mut seen = vec![false; n];
    let mut stack = vec![tree.root];
    while let Some(id) = stack.pop() {
        seen[id] = true;
        if let Node::Internal { left, right, .. } = &tree.nodes[id] {
            stack.push(*left);
            stack.push(*right);
        }
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(malformed(format!("node {id} is unreachable from the root")));
    }

    let schema = &tree.schema;
    let n_labels = schema.labels().len();
    let single_leaf = n == 1;
    for (id, node) in tree.nodes.iter().enumerate() {
        match node {
            Node::Internal { split, .. } => {
                let Some(def) = schema.feature(split.feature) else {
                    return Err(malformed(format!("node {id}: feature index {} out of range", split.feature)));
                };
                match (&split.test, def.kind) {
                    (SplitTest::NumericLe { threshold }, FeatureKind::Numeric) => {
                        if !threshold.is_finite() {
                            return Err(malformed(format!("node {id}: threshold must be finite")));
                        }
                    }
                    (SplitTest::CategoricalIn { categories }, FeatureKind::Categorical) => {
                        let vocab = def.vocabulary.as_deref().unwrap_or_default();
                        let mut sorted = categories.clone();
                        sorted.sort();
                        sorted.dedup();
                        if sorted.len() != categories.len()
                            || categories.is_empty()
                            || categories.len() >= vocab.len()
                            || categories.iter().any(|c| !vocab.contains(c))
                        {
                            return Err(malformed(format!(
                                "node {id}: categorical subset must be a non-empty proper subset of the vocabulary"
                            )));
                        }
                    }
                    (SplitTest::BooleanIs { .. }, FeatureKind::Boolean) => {}
                    _ => {
                        return Err(malformed(format!(
                            "node {id}: predicate kind does not match feature `{}` ({})",
                            def.name, def.kind
                        )))
                    }
                }
            }
            Node::Leaf { distribution, n_train } => {
                if distribution.len() != n_labels {
                    return Err(malformed(format!(
                        "node {id}: distribution has {} entries for {n_labels} labels",
                        distribution.len()
                    )));
                }
                if distribution.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(malformed(format!("node {id}: probabilities must be finite and nonnegative")));
                }
                let sum: f64 = distribution.iter().sum();
                if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                    return Err(malformed(format!(
                        "node {id}: leaf distribution must sum to 1 ± 1e-9, sums to {sum}"
                    )));
                }
                // a lone root leaf may hold fewer rows than min_leaf
                if !single_leaf && *n_train < tree.params.min_leaf {
                    return Err(malformed(format!(
                        "node {id}: n_train {n_train} below min_leaf {}",
                        tree.params.min_leaf
                    )));
                }
            }
        }
    }
    let depth = tree.depth();
    if depth > tree.params.max_depth {
        return Err(malformed(format!("depth {depth} exceeds max_depth {}", tree.params.max_depth)));
    }
    if tree.feature_ranges.len() != schema.len() {
        return Err(malformed(format!(
            "feature_ranges has {} entries for {} features",
            tree.feature_ranges.len(),
            schema.len()
        )));
    }
    Ok(())
}
