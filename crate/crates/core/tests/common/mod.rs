//! Independent reference implementations used by the property and acceptance
//! tests. None of them call into the code they check beyond reading tree
//! structure.
#![allow(dead_code)]

pub mod expr;
pub mod fuzz;

use std::cmp::Ordering;

use arbor_core::tree::{Dataset, DecisionTree, Node, SplitPredicate, SplitTest};
use arbor_core::types::{FeatureDef, FeatureKind, FeatureValue, LabelDef, Schema, StructuredInput};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

const SYMBOLS: [&str; 5] = ["red", "blue", "green", "amber", "cyan"];

/// Mixed-kind schema with `k` features. Categorical vocabularies are listed
/// out of lexicographic order on purpose.
pub fn random_schema(rng: &mut StdRng, k: usize, n_labels: usize) -> Schema {
    let features = (0..k)
        .map(|j| match rng.gen_range(0..10) {
            0..=5 => FeatureDef::numeric(format!("f{j}")),
            6..=7 => FeatureDef::boolean(format!("f{j}")),
            _ => {
                let mut vocab = SYMBOLS.to_vec();
                vocab.shuffle(rng);
                vocab.truncate(rng.gen_range(2..=4));
                FeatureDef::categorical(format!("f{j}"), vocab)
            }
        })
        .collect();
    let label = LabelDef {
        name: "y".into(),
        vocabulary: (0..n_labels).map(|i| format!("L{i}")).collect(),
    };
    Schema::new(features, label).expect("generated schema is valid")
}

/// A value drawn from a coarse grid, so datasets carry many duplicates.
pub fn random_value(rng: &mut StdRng, def: &FeatureDef, grid: u32) -> FeatureValue {
    match def.kind {
        FeatureKind::Numeric => FeatureValue::Numeric(rng.gen_range(0..=grid) as f64 * 0.5),
        FeatureKind::Boolean => FeatureValue::Boolean(rng.gen()),
        FeatureKind::Categorical => {
            let vocab = def.vocabulary.as_ref().expect("categorical vocabulary");
            FeatureValue::Categorical(vocab[rng.gen_range(0..vocab.len())].clone())
        }
    }
}

pub fn random_dataset(rng: &mut StdRng, m: usize, k: usize, n_labels: usize) -> Dataset {
    let schema = random_schema(rng, k, n_labels);
    let grid = *[3u32, 10, 40].choose(rng).unwrap();
    let rows: Vec<StructuredInput> = (0..m)
        .map(|i| {
            let features = schema.features().iter().map(|d| random_value(rng, d, grid)).collect();
            StructuredInput::new(features, format!("r{i}"))
        })
        .collect();
    let labels: Vec<String> = (0..m).map(|_| format!("L{}", rng.gen_range(0..n_labels))).collect();
    Dataset::new(schema, rows, &labels).expect("generated dataset is valid")
}

/// Gini best split found by enumerating every admissible split and comparing
/// impurity decreases as exact rationals.
#[derive(Debug, Clone)]
pub struct OracleSplit {
    pub feature: usize,
    /// Row membership of the left child.
    pub left: Vec<bool>,
    /// For numeric splits: the two consecutive distinct values around the cut.
    pub between: Option<(f64, f64)>,
    pub category: Option<String>,
    pub gain: f64,
}

fn gini_score(rows: &[(usize, bool)], n_labels: usize) -> Option<(u128, u128)> {
    let mut l = vec![0u128; n_labels];
    let mut r = vec![0u128; n_labels];
    for &(label, left) in rows {
        if left {
            l[label] += 1;
        } else {
            r[label] += 1;
        }
    }
    let (nl, nr): (u128, u128) = (l.iter().sum(), r.iter().sum());
    if nl == 0 || nr == 0 {
        return None;
    }
    let a: u128 = l.iter().map(|c| c * c).sum();
    let b: u128 = r.iter().map(|c| c * c).sum();
    // Σ L²/nl + Σ R²/nr; larger means purer children.
    Some((a * nr + b * nl, nl * nr))
}

fn cmp_frac(x: (u128, u128), y: (u128, u128)) -> Ordering {
    (x.0 * y.1).cmp(&(y.0 * x.1))
}

pub fn oracle_best_split(ds: &Dataset, features: &[usize]) -> Option<OracleSplit> {
    let n = ds.len();
    let n_labels = ds.schema().labels().len();
    let labels = ds.labels();
    let mut parent = vec![0u128; n_labels];
    for &l in labels {
        parent[l] += 1;
    }
    if n < 2 || parent.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let mut fs = features.to_vec();
    fs.sort_unstable();
    fs.dedup();

    let mut candidates: Vec<OracleSplit> = Vec::new();
    for f in fs {
        let def = &ds.schema().features()[f];
        let col: Vec<&FeatureValue> = ds.rows().iter().map(|r| &r.features[f]).collect();
        match def.kind {
            FeatureKind::Numeric => {
                let mut vals: Vec<f64> = col.iter().map(|v| v.as_f64().unwrap()).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    candidates.push(OracleSplit {
                        feature: f,
                        left: col.iter().map(|v| v.as_f64().unwrap() <= w[0]).collect(),
                        between: Some((w[0], w[1])),
                        category: None,
                        gain: 0.0,
                    });
                }
            }
            FeatureKind::Boolean => candidates.push(OracleSplit {
                feature: f,
                left: col.iter().map(|v| **v == FeatureValue::Boolean(false)).collect(),
                between: None,
                category: None,
                gain: 0.0,
            }),
            FeatureKind::Categorical => {
                let mut vocab = def.vocabulary.clone().unwrap();
                vocab.sort();
                for c in vocab {
                    candidates.push(OracleSplit {
                        feature: f,
                        left: col.iter().map(|v| matches!(v, FeatureValue::Categorical(s) if *s == c)).collect(),
                        between: None,
                        category: Some(c),
                        gain: 0.0,
                    });
                }
            }
        }
    }

    let mut best: Option<((u128, u128), OracleSplit)> = None;
    for c in candidates {
        let rows: Vec<(usize, bool)> = labels.iter().copied().zip(c.left.iter().copied()).collect();
        let Some(score) = gini_score(&rows, n_labels) else { continue };
        if best.as_ref().is_none_or(|(s, _)| cmp_frac(score, *s) == Ordering::Greater) {
            best = Some((score, c));
        }
    }
    best.map(|(s, mut c)| {
        // gain = S/n − Σ parent² / n²
        let p2: u128 = parent.iter().map(|c| c * c).sum();
        let n = n as u128;
        c.gain = (s.0 as f64 * n as f64 - p2 as f64 * s.1 as f64) / (s.1 as f64 * (n * n) as f64);
        c
    })
}

/// Checks an implementation split against the oracle; `Err` explains the first
/// disagreement.
pub fn same_split(ds: &Dataset, got: &Option<(SplitPredicate, f64)>, want: &Option<OracleSplit>) -> Result<(), String> {
    match (got, want) {
        (None, None) => Ok(()),
        (Some((p, _)), None) => Err(format!("implementation split {p:?}, oracle found none")),
        (None, Some(w)) => Err(format!("implementation found no split, oracle split on feature {}", w.feature)),
        (Some((p, gain)), Some(w)) => {
            if p.feature != w.feature {
                return Err(format!("feature {} vs oracle {}", p.feature, w.feature));
            }
            let left: Vec<bool> = ds.rows().iter().map(|r| eval(&p.test, &r.features[p.feature])).collect();
            if left != w.left {
                return Err(format!("partition differs on feature {}: {p:?}", p.feature));
            }
            match (&p.test, w.between, &w.category) {
                (SplitTest::NumericLe { threshold }, Some((lo, hi)), None) => {
                    let mid = (lo + hi) / 2.0;
                    if (threshold - mid).abs() > 1e-9 * mid.abs().max(1.0) {
                        return Err(format!("threshold {threshold} vs midpoint {mid}"));
                    }
                }
                (SplitTest::CategoricalIn { categories }, None, Some(c)) => {
                    if categories != std::slice::from_ref(c) {
                        return Err(format!("categories {categories:?} vs oracle {c}"));
                    }
                }
                (SplitTest::BooleanIs { value: false }, None, None) => {}
                other => return Err(format!("predicate shape {other:?}")),
            }
            if (gain - w.gain).abs() > 1e-12 {
                return Err(format!("gain {gain} vs oracle {}", w.gain));
            }
            Ok(())
        }
    }
}

/// Predicate semantics written out independently: true sends the row left.
pub fn eval(test: &SplitTest, v: &FeatureValue) -> bool {
    match (test, v) {
        (SplitTest::NumericLe { threshold }, FeatureValue::Numeric(x)) => x <= threshold,
        (SplitTest::CategoricalIn { categories }, FeatureValue::Categorical(s)) => categories.contains(s),
        (SplitTest::BooleanIs { value }, FeatureValue::Boolean(b)) => b == value,
        other => panic!("ill-typed predicate evaluation {other:?}"),
    }
}

/// The set of values a leaf region admits for one feature.
#[derive(Debug, Clone)]
pub enum Cell {
    /// Half-open interval (lo, hi].
    Num { lo: f64, hi: f64 },
    Cat(Vec<String>),
    Bool { f: bool, t: bool },
}

impl Cell {
    pub fn contains(&self, v: &FeatureValue) -> bool {
        match (self, v) {
            (Cell::Num { lo, hi }, FeatureValue::Numeric(x)) => lo < x && x <= hi,
            (Cell::Cat(allowed), FeatureValue::Categorical(s)) => allowed.contains(s),
            (Cell::Bool { f, t }, FeatureValue::Boolean(b)) => if *b { *t } else { *f },
            _ => false,
        }
    }
}

pub type Region = Vec<Cell>;

/// Every leaf with the box of inputs that reaches it, found by a depth-first
/// walk that narrows one feature per internal node.
pub fn leaf_regions(tree: &DecisionTree) -> Vec<(usize, Region)> {
    let full: Region = tree
        .schema()
        .features()
        .iter()
        .map(|d| match d.kind {
            FeatureKind::Numeric => Cell::Num {
                lo: f64::NEG_INFINITY,
                hi: f64::INFINITY,
            },
            FeatureKind::Categorical => Cell::Cat(d.vocabulary.clone().unwrap()),
            FeatureKind::Boolean => Cell::Bool { f: true, t: true },
        })
        .collect();
    let mut out = Vec::new();
    let mut stack = vec![(tree.root(), full)];
    while let Some((id, region)) = stack.pop() {
        match &tree.nodes()[id] {
            Node::Leaf { .. } => out.push((id, region)),
            Node::Internal { split, left, right } => {
                let (mut l, mut r) = (region.clone(), region);
                let j = split.feature;
                match (&split.test, l[j].clone()) {
                    (SplitTest::NumericLe { threshold }, Cell::Num { lo, hi }) => {
                        l[j] = Cell::Num { lo, hi: hi.min(*threshold) };
                        r[j] = Cell::Num { lo: lo.max(*threshold), hi };
                    }
                    (SplitTest::CategoricalIn { categories }, Cell::Cat(allowed)) => {
                        l[j] = Cell::Cat(allowed.iter().filter(|c| categories.contains(c)).cloned().collect());
                        r[j] = Cell::Cat(allowed.iter().filter(|c| !categories.contains(c)).cloned().collect());
                    }
                    (SplitTest::BooleanIs { value }, Cell::Bool { f, t }) => {
                        l[j] = Cell::Bool { f: f && !value, t: t && *value };
                        r[j] = Cell::Bool { f: f && *value, t: t && !value };
                    }
                    other => panic!("predicate does not fit its feature: {other:?}"),
                }
                stack.push((*left, l));
                stack.push((*right, r));
            }
        }
    }
    out
}

/// The unique region containing `x`; panics unless exactly one does.
pub fn region_leaf(regions: &[(usize, Region)], x: &StructuredInput) -> usize {
    let mut hits = regions
        .iter()
        .filter(|(_, r)| r.iter().zip(&x.features).all(|(c, v)| c.contains(v)))
        .map(|(id, _)| *id);
    let first = hits.next().expect("some region contains x");
    assert!(hits.next().is_none(), "regions overlap at {x:?}");
    first
}

/// Majority label index, ties to the earliest label.
pub fn majority(tree: &DecisionTree, leaf: usize) -> usize {
    let Node::Leaf { distribution, .. } = &tree.nodes()[leaf] else {
        panic!("node {leaf} is not a leaf")
    };
    let mut best = 0;
    for i in 1..distribution.len() {
        if distribution[i] > distribution[best] {
            best = i;
        }
    }
    best
}

/// Re-walks a trace from the root against `x`, checking every recorded field.
pub fn walk_trace(tree: &DecisionTree, x: &StructuredInput, trace: &arbor_core::tree::RuleTrace) -> Result<usize, String> {
    let mut node = tree.root();
    for (i, step) in trace.steps.iter().enumerate() {
        let Node::Internal { split, left, right } = &tree.nodes()[node] else {
            return Err(format!("step {i} starts at leaf {node}"));
        };
        if step.node_id != node {
            return Err(format!("step {i} names node {} but the walk is at {node}", step.node_id));
        }
        if step.feature_index != split.feature || step.predicate != split.test {
            return Err(format!("step {i} records a different predicate"));
        }
        let v = &x.features[split.feature];
        if &step.observed != v {
            return Err(format!("step {i} observed {:?}, input has {v:?}", step.observed));
        }
        let goes_left = eval(&split.test, v);
        let recorded_left = step.branch == arbor_core::tree::Branch::Left;
        if goes_left != recorded_left {
            return Err(format!("step {i} took the wrong branch"));
        }
        node = if goes_left { *left } else { *right };
    }
    if !matches!(tree.nodes()[node], Node::Leaf { .. }) {
        return Err(format!("walk stops at internal node {node}"));
    }
    if node != trace.leaf_id {
        return Err(format!("walk reaches {node}, trace claims {}", trace.leaf_id));
    }
    Ok(node)
}

/// Grid oracle for the cheapest move into a leaf predicting `target`. Numeric
/// candidates per feature are the current value, every threshold on that
/// feature, and the first admissible value just past each threshold.
pub fn grid_counterfactual(tree: &DecisionTree, x: &StructuredInput, target: usize, cost: &[f64]) -> Option<f64> {
    let schema = tree.schema();
    let regions = leaf_regions(tree);
    let mut axes: Vec<Vec<(FeatureValue, f64)>> = Vec::new();
    for (j, def) in schema.features().iter().enumerate() {
        let here = &x.features[j];
        let axis = match def.kind {
            FeatureKind::Numeric => {
                let v = here.as_f64().unwrap();
                let mut ts: Vec<f64> = tree
                    .nodes()
                    .iter()
                    .filter_map(|n| match n {
                        Node::Internal {
                            split:
                                SplitPredicate {
                                    feature,
                                    test: SplitTest::NumericLe { threshold },
                                },
                            ..
                        } if *feature == j => Some(*threshold),
                        _ => None,
                    })
                    .collect();
                ts.sort_by(f64::total_cmp);
                ts.dedup();
                let eps = match tree.feature_ranges()[j] {
                    Some([lo, hi]) if hi > lo => 1e-6 * (hi - lo),
                    _ => 1e-6,
                };
                let mut pts = vec![v];
                for (i, &t) in ts.iter().enumerate() {
                    pts.push(t);
                    let step = ts.get(i + 1).map_or(eps, |&next| eps.min((next - t) / 2.0));
                    pts.push(t + step);
                }
                pts.into_iter()
                    .map(|p| (FeatureValue::Numeric(p), cost[j] * (p - v).abs()))
                    .collect()
            }
            FeatureKind::Categorical => def
                .vocabulary
                .as_ref()
                .unwrap()
                .iter()
                .map(|c| {
                    let moved = !matches!(here, FeatureValue::Categorical(s) if s == c);
                    (FeatureValue::Categorical(c.clone()), if moved { cost[j] } else { 0.0 })
                })
                .collect(),
            FeatureKind::Boolean => [false, true]
                .into_iter()
                .map(|b| {
                    let moved = *here != FeatureValue::Boolean(b);
                    (FeatureValue::Boolean(b), if moved { cost[j] } else { 0.0 })
                })
                .collect(),
        };
        axes.push(axis);
    }

    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; axes.len()];
    loop {
        let point = StructuredInput::new(idx.iter().zip(&axes).map(|(&i, a)| a[i].0.clone()).collect(), "grid");
        let c: f64 = idx.iter().zip(&axes).map(|(&i, a)| a[i].1).sum();
        if best.is_none_or(|b| c < b) && majority(tree, region_leaf(&regions, &point)) == target {
            best = Some(c);
        }
        // odometer increment
        let mut j = 0;
        loop {
            if j == axes.len() {
                return best;
            }
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// A point near the data range, landing exactly on a threshold now and then.
pub fn random_point(rng: &mut StdRng, tree: &DecisionTree, hot: &[Vec<f64>]) -> StructuredInput {
    let features = tree
        .schema()
        .features()
        .iter()
        .enumerate()
        .map(|(j, def)| match def.kind {
            FeatureKind::Numeric => {
                if !hot[j].is_empty() && rng.gen_bool(0.2) {
                    FeatureValue::Numeric(*hot[j].choose(rng).unwrap())
                } else {
                    let [lo, hi] = tree.feature_ranges()[j].unwrap_or([0.0, 1.0]);
                    FeatureValue::Numeric(rng.gen_range(lo - 1.0..=hi + 1.0))
                }
            }
            _ => random_value(rng, def, 0),
        })
        .collect();
    StructuredInput::new(features, "p")
}

/// Thresholds per numeric feature, for boundary sampling.
pub fn thresholds(tree: &DecisionTree) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); tree.schema().len()];
    for n in tree.nodes() {
        if let Node::Internal {
            split: SplitPredicate {
                feature,
                test: SplitTest::NumericLe { threshold },
            },
            ..
        } = n
        {
            out[*feature].push(*threshold);
        }
    }
    out
}

/// Checks `points` random inputs: the predicted leaf is the unique region
/// containing the input, the outcome is that leaf's majority, and the trace
/// walks the tree to it.
pub fn check_tree_against_regions(tree: &DecisionTree, r: &mut StdRng, points: usize) -> Result<(), String> {
    let regions = leaf_regions(tree);
    let hot = thresholds(tree);
    for _ in 0..points {
        let x = random_point(r, tree, &hot);
        let v = tree.predict_with_trace(&x).map_err(|e| e.to_string())?;
        let leaf = region_leaf(&regions, &x);
        let t = v.trace().unwrap();
        if t.leaf_id != leaf {
            return Err(format!("prediction leaf {} vs region leaf {leaf}", t.leaf_id));
        }
        if v.outcome != tree.schema().labels()[majority(tree, leaf)] {
            return Err("outcome is not the leaf majority".into());
        }
        walk_trace(tree, &x, t)?;
        if t.steps.len() > tree.params().max_depth {
            return Err("trace longer than max_depth".into());
        }
    }
    Ok(())
}

/// Balanced separable data: `bits` boolean features enumerate 2^bits rows and
/// the label is their parity, so an exact tree needs every bit.
pub fn parity_dataset(bits: usize) -> Dataset {
    let m = 1usize << bits;
    let features = (0..bits).map(|b| FeatureDef::boolean(format!("b{b}"))).collect();
    let schema = Schema::new(
        features,
        LabelDef {
            name: "y".into(),
            vocabulary: vec!["A".into(), "B".into()],
        },
    )
    .unwrap();
    let rows = (0..m)
        .map(|i| StructuredInput::new((0..bits).map(|b| FeatureValue::Boolean(i >> b & 1 == 1)).collect(), format!("r{i}")))
        .collect();
    let labels: Vec<&str> = (0..m).map(|i| if i.count_ones() % 2 == 0 { "A" } else { "B" }).collect();
    Dataset::new(schema, rows, &labels).unwrap()
}
