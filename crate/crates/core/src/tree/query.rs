//! Interventional queries against a trained oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{FeatureKind, FeatureValue, Schema, StructuredInput};

use super::{argmax, Branch, DecisionTree, Model, Node, RuleTrace, SplitPredicate, SplitTest, SymbolicVerdict, TraceStep, TreeError};

/// Where two traces of the same tree part ways. `before` and `after` hold the
/// steps from `divergence_index` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDiff {
    pub tree_index: usize,
    pub divergence_index: usize,
    pub before: Vec<TraceStep>,
    pub after: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub before: SymbolicVerdict,
    pub after: SymbolicVerdict,
    /// One entry per member tree whose path changed; empty when none did.
    pub changed_steps: Vec<TraceDiff>,
}

impl WhatIfResult {
    /// Earliest divergence over all member trees.
    pub fn divergence_index(&self) -> Option<usize> {
        self.changed_steps.iter().map(|d| d.divergence_index).min()
    }
}

/// Resolves named modifications against `schema`, rejecting unknown names,
/// missing values and kind mismatches.
pub fn resolve_assignment(
    schema: &Schema,
    assignment: &BTreeMap<String, FeatureValue>,
) -> Result<Vec<(usize, FeatureValue)>, TreeError> {
    assignment
        .iter()
        .map(|(name, value)| {
            let i = schema
                .feature_index(name)
                .ok_or_else(|| TreeError::UnknownFeature(name.clone()))?;
            if value.is_missing() {
                return Err(TreeError::SchemaMismatch(crate::types::SchemaError::MissingFeature(name.clone())));
            }
            schema.check_value(i, value).map_err(TreeError::SchemaMismatch)?;
            Ok((i, value.clone()))
        })
        .collect()
}

/// Re-evaluates `model` on `x` overwritten by `modifications`.
pub fn what_if(
    model: &Model,
    x: &StructuredInput,
    modifications: &BTreeMap<String, FeatureValue>,
) -> Result<WhatIfResult, TreeError> {
    let resolved = resolve_assignment(model.schema(), modifications)?;
    let before = model.predict(x)?;
    let mut modified = x.clone();
    for (i, v) in resolved {
        modified.features[i] = v;
    }
    let after = model.predict(&modified)?;
    let changed_steps = before
        .traces()
        .into_iter()
        .zip(after.traces())
        .enumerate()
        .filter_map(|(tree_index, (b, a))| diff_traces(tree_index, b, a))
        .collect();
    Ok(WhatIfResult {
        before,
        after,
        changed_steps,
    })
}

fn diff_traces(tree_index: usize, before: &RuleTrace, after: &RuleTrace) -> Option<TraceDiff> {
    let same = |a: &TraceStep, b: &TraceStep| a.node_id == b.node_id && a.branch == b.branch;
    let shared = before.steps.iter().zip(&after.steps).take_while(|(a, b)| same(a, b)).count();
    if shared == before.steps.len() && shared == after.steps.len() {
        return None;
    }
    Some(TraceDiff {
        tree_index,
        divergence_index: shared,
        before: before.steps[shared..].to_vec(),
        after: after.steps[shared..].to_vec(),
    })
}

/// Feasible values of each feature inside one region of the tree.
#[derive(Debug, Clone)]
enum Constraint {
    /// `lo < x ≤ hi`
    Numeric { lo: f64, hi: f64 },
    Categorical { allowed: Vec<bool> },
    Boolean { allowed: [bool; 2] },
}

#[derive(Debug, Clone)]
struct Region(Vec<Constraint>);

impl Region {
    fn full(schema: &Schema) -> Self {
        Region(
            schema
                .features()
                .iter()
                .map(|f| match f.kind {
                    FeatureKind::Numeric => Constraint::Numeric {
                        lo: f64::NEG_INFINITY,
                        hi: f64::INFINITY,
                    },
                    FeatureKind::Categorical => Constraint::Categorical {
                        allowed: vec![true; f.vocabulary.as_ref().map_or(0, Vec::len)],
                    },
                    FeatureKind::Boolean => Constraint::Boolean { allowed: [true; 2] },
                })
                .collect(),
        )
    }

    /// Intersects with one side of `split`; `None` if the result is empty.
    fn restrict(&self, schema: &Schema, split: &SplitPredicate, left: bool) -> Option<Region> {
        let mut next = self.clone();
        match (&mut next.0[split.feature], &split.test) {
            (Constraint::Numeric { lo, hi }, SplitTest::NumericLe { threshold }) => {
                if left {
                    *hi = hi.min(*threshold);
                } else {
                    *lo = lo.max(*threshold);
                }
                if *lo >= *hi {
                    return None;
                }
            }
            (Constraint::Categorical { allowed }, SplitTest::CategoricalIn { categories }) => {
                let vocab = schema.features()[split.feature].vocabulary.as_deref().unwrap_or_default();
                for (slot, symbol) in allowed.iter_mut().zip(vocab) {
                    if categories.contains(symbol) != left {
                        *slot = false;
                    }
                }
                if !allowed.iter().any(|&a| a) {
                    return None;
                }
            }
            (Constraint::Boolean { allowed }, SplitTest::BooleanIs { value }) => {
                let keep = if left { *value } else { !*value };
                allowed[usize::from(!keep)] = false;
                if !allowed.iter().any(|&a| a) {
                    return None;
                }
            }
            _ => return None,
        }
        Some(next)
    }
}

/// Every leaf with its region and root-to-leaf path.
fn leaf_regions(tree: &DecisionTree) -> Vec<(usize, Region, Vec<(usize, Branch)>)> {
    let mut out = Vec::new();
    let mut stack = vec![(tree.root(), Region::full(tree.schema()), Vec::new())];
    while let Some((id, region, path)) = stack.pop() {
        match &tree.nodes()[id] {
            Node::Leaf { .. } => out.push((id, region, path)),
            Node::Internal { split, left, right } => {
                for (child, is_left) in [(*right, false), (*left, true)] {
                    if let Some(r) = region.restrict(tree.schema(), split, is_left) {
                        let mut p = path.clone();
                        p.push((id, if is_left { Branch::Left } else { Branch::Right }));
                        stack.push((child, r, p));
                    }
                }
            }
        }
    }
    out.sort_by_key(|(id, _, _)| *id);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub modifications: BTreeMap<String, FeatureValue>,
    pub cost: f64,
    pub leaf_id: usize,
}

/// Offset past an open numeric bound: 1e-6 of the feature's training range.
fn epsilon(tree: &DecisionTree, feature: usize) -> f64 {
    match tree.feature_ranges().get(feature).copied().flatten() {
        Some([lo, hi]) if hi > lo => 1e-6 * (hi - lo),
        _ => 1e-6,
    }
}

/// Cheapest modification of `x` that lands in a leaf whose majority label is
/// `target_label`, under weighted L1 for numerics and unit cost per changed
/// categorical or boolean. `None` when no leaf predicts the target.
pub fn nearest_counterfactual(
    tree: &DecisionTree,
    x: &StructuredInput,
    target_label: &str,
    cost: &[f64],
) -> Result<Option<Counterfactual>, TreeError> {
    let schema = tree.schema();
    schema.check_complete(x).map_err(TreeError::SchemaMismatch)?;
    let target = schema
        .label_index(target_label)
        .map_err(|_| TreeError::UnknownLabel(target_label.to_string()))?;
    if cost.len() != schema.len() {
        return Err(TreeError::InvalidCost(format!("expected {} weights, got {}", schema.len(), cost.len())));
    }
    if let Some(w) = cost.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(TreeError::InvalidCost(format!("weights must be positive and finite, got {w}")));
    }

    let mut best: Option<Counterfactual> = None;
    for (leaf_id, region, _) in leaf_regions(tree) {
        let Node::Leaf { distribution, .. } = &tree.nodes()[leaf_id] else {
            continue;
        };
        if argmax(distribution) != target {
            continue;
        }
        let mut total = 0.0;
        let mut mods = BTreeMap::new();
        for (j, constraint) in region.0.iter().enumerate() {
            let def = &schema.features()[j];
            match (constraint, &x.features[j]) {
                (Constraint::Numeric { lo, hi }, FeatureValue::Numeric(v)) => {
                    let moved = if *v <= *lo {
                        // open lower bound: step just past it, staying inside the cell
                        let step = if hi.is_finite() { epsilon(tree, j).min((hi - lo) / 2.0) } else { epsilon(tree, j) };
                        Some(lo + step)
                    } else if *v > *hi {
                        Some(*hi)
                    } else {
                        None
                    };
                    if let Some(m) = moved {
                        total += cost[j] * (m - v).abs();
                        mods.insert(def.name.clone(), FeatureValue::Numeric(m));
                    }
                }
                (Constraint::Categorical { allowed }, FeatureValue::Categorical(s)) => {
                    let vocab = def.vocabulary.as_deref().unwrap_or_default();
                    let current = def.category_index(s).unwrap_or(usize::MAX);
                    if !allowed.get(current).copied().unwrap_or(false) {
                        let pick = allowed.iter().position(|&a| a).expect("non-empty region");
                        total += cost[j];
                        mods.insert(def.name.clone(), FeatureValue::Categorical(vocab[pick].clone()));
                    }
                }
                (Constraint::Boolean { allowed }, FeatureValue::Boolean(b)) => {
                    if !allowed[usize::from(*b)] {
                        total += cost[j];
                        mods.insert(def.name.clone(), FeatureValue::Boolean(!*b));
                    }
                }
                _ => unreachable!("schema-checked input"),
            }
        }
        if best.as_ref().is_none_or(|b| total < b.cost) {
            best = Some(Counterfactual {
                modifications: mods,
                cost: total,
                leaf_id,
            });
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyStatus {
    Consistent,
    Inconsistent,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub assignment: BTreeMap<String, FeatureValue>,
    pub claimed_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub agrees: bool,
    pub label: String,
    /// Steps on unassigned features record `null` as the observed value.
    pub trace: RuleTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub status: ConsistencyStatus,
    pub reachable_leaves: Vec<usize>,
    pub witnesses: Vec<Witness>,
}

/// Checks whether every leaf reachable under a partial assignment agrees with
/// the claimed label.
pub fn check_consistency(tree: &DecisionTree, hypothesis: &Hypothesis) -> Result<ConsistencyReport, TreeError> {
    let schema = tree.schema();
    let claimed = schema
        .label_index(&hypothesis.claimed_label)
        .map_err(|_| TreeError::UnknownLabel(hypothesis.claimed_label.clone()))?;
    let mut assigned: Vec<Option<FeatureValue>> = vec![None; schema.len()];
    for (i, v) in resolve_assignment(schema, &hypothesis.assignment)? {
        assigned[i] = Some(v);
    }

    let mut reachable = Vec::new();
    let mut agree: Option<RuleTrace> = None;
    let mut disagree: Option<RuleTrace> = None;
    // depth-first, left branch first, so witnesses are the leftmost leaves
    let mut stack = vec![(tree.root(), Region::full(schema), Vec::<TraceStep>::new())];
    while let Some((id, region, steps)) = stack.pop() {
        match &tree.nodes()[id] {
            Node::Leaf { distribution, .. } => {
                reachable.push(id);
                let slot = if argmax(distribution) == claimed { &mut agree } else { &mut disagree };
                if slot.is_none() {
                    *slot = Some(RuleTrace { steps, leaf_id: id });
                }
            }
            Node::Internal { split, left, right } => {
                let name = &schema.features()[split.feature].name;
                let step = |branch| TraceStep {
                    node_id: id,
                    feature_index: split.feature,
                    feature: name.clone(),
                    predicate: split.test.clone(),
                    rendered: split.render(name),
                    observed: assigned[split.feature].clone().unwrap_or(FeatureValue::Missing),
                    branch,
                };
                let sides: Vec<bool> = match &assigned[split.feature] {
                    Some(v) => vec![split.evaluate(v).expect("resolved assignment matches kinds")],
                    None => vec![false, true],
                };
                for is_left in sides {
                    if let Some(r) = region.restrict(schema, split, is_left) {
                        let mut s = steps.clone();
                        s.push(step(if is_left { Branch::Left } else { Branch::Right }));
                        stack.push((if is_left { *left } else { *right }, r, s));
                    }
                }
            }
        }
    }
    reachable.sort_unstable();
    let status = match (&agree, &disagree) {
        (Some(_), None) => ConsistencyStatus::Consistent,
        (None, Some(_)) => ConsistencyStatus::Inconsistent,
        _ => ConsistencyStatus::Undetermined,
    };
    let witnesses = [(true, agree), (false, disagree)]
        .into_iter()
        .filter_map(|(agrees, t)| {
            t.map(|trace| Witness {
                agrees,
                label: tree.leaf_label(trace.leaf_id).unwrap_or_default().to_string(),
                trace,
            })
        })
        .collect();
    Ok(ConsistencyReport {
        status,
        reachable_leaves: reachable,
        witnesses,
    })
}
