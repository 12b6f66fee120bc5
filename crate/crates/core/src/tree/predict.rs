use crate::types::{Schema, StructuredInput};

use super::{argmax, Branch, Derivation, DecisionTree, Forest, Node, RuleTrace, SymbolicVerdict, TraceStep, TreeError};

/// A trained symbolic oracle: a single tree or a forest.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Tree(DecisionTree),
    Forest(Forest),
}

impl Model {
    pub fn schema(&self) -> &Schema {
        match self {
            Model::Tree(t) => t.schema(),
            Model::Forest(f) => f.schema(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Tree(_) => "tree",
            Model::Forest(_) => "forest",
        }
    }

    pub fn as_tree(&self) -> Option<&DecisionTree> {
        match self {
            Model::Tree(t) => Some(t),
            Model::Forest(_) => None,
        }
    }

    /// Maximum depth over member trees.
    pub fn depth(&self) -> usize {
        match self {
            Model::Tree(t) => t.depth(),
            Model::Forest(f) => f.trees().iter().map(DecisionTree::depth).max().unwrap_or(0),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Model::Tree(t) => t.leaf_count(),
            Model::Forest(f) => f.trees().iter().map(DecisionTree::leaf_count).sum(),
        }
    }

    /// `y_tree = T(x)` with its derivation.
    pub fn predict(&self, x: &StructuredInput) -> Result<SymbolicVerdict, TreeError> {
        match self {
            Model::Tree(t) => t.predict_with_trace(x),
            Model::Forest(f) => f.predict_with_trace(x),
        }
    }
}

impl DecisionTree {
    pub fn predict_with_trace(&self, x: &StructuredInput) -> Result<SymbolicVerdict, TreeError> {
        self.schema.check_complete(x).map_err(TreeError::SchemaMismatch)?;
        let trace = self.trace(x);
        let Node::Leaf { distribution, .. } = &self.nodes[trace.leaf_id] else {
            unreachable!("traces end at leaves")
        };
        let best = argmax(distribution);
        Ok(SymbolicVerdict {
            outcome: self.schema.labels()[best].clone(),
            confidence: distribution[best],
            derivation: Derivation::Tree(trace),
        })
    }

    /// Walks `x` from the root. `x` must already conform to the schema.
    pub(crate) fn trace(&self, x: &StructuredInput) -> RuleTrace {
        let mut steps = Vec::new();
        let mut id = self.root;
        while let Node::Internal { split, left, right } = &self.nodes[id] {
            let observed = &x.features[split.feature];
            let go_left = split
                .evaluate(observed)
                .expect("schema-checked input matches predicate kinds");
            let name = &self.schema.features()[split.feature].name;
            steps.push(TraceStep {
                node_id: id,
                feature_index: split.feature,
                feature: name.clone(),
                predicate: split.test.clone(),
                rendered: split.render(name),
                observed: observed.clone(),
                branch: if go_left { Branch::Left } else { Branch::Right },
            });
            id = if go_left { *left } else { *right };
        }
        RuleTrace { steps, leaf_id: id }
    }

    /// Leaf reached by `x`.
    pub fn leaf_for(&self, x: &StructuredInput) -> Result<usize, TreeError> {
        self.schema.check_complete(x).map_err(TreeError::SchemaMismatch)?;
        Ok(self.trace(x).leaf_id)
    }
}

impl Forest {
    pub fn predict_with_trace(&self, x: &StructuredInput) -> Result<SymbolicVerdict, TreeError> {
        self.schema().check_complete(x).map_err(TreeError::SchemaMismatch)?;
        let labels = self.schema().labels();
        let mut votes = vec![0usize; labels.len()];
        let mut traces = Vec::with_capacity(self.trees().len());
        for tree in self.trees() {
            let trace = tree.trace(x);
            let Node::Leaf { distribution, .. } = &tree.nodes()[trace.leaf_id] else {
                unreachable!("traces end at leaves")
            };
            votes[argmax(distribution)] += 1;
            traces.push(trace);
        }
        let mut best = 0;
        for (i, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = i;
            }
        }
        Ok(SymbolicVerdict {
            outcome: labels[best].clone(),
            confidence: votes[best] as f64 / self.trees().len() as f64,
            derivation: Derivation::Forest { traces, votes },
        })
    }
}

/// Re-evaluates `trace` step by step from the root of `tree`, using only the
/// observed values recorded in the trace. Returns the leaf reached, or a
/// description of the first step that does not replay.
pub fn replay_trace(tree: &DecisionTree, trace: &RuleTrace) -> Result<usize, String> {
    let mut id = tree.root();
    for (i, step) in trace.steps.iter().enumerate() {
        let Node::Internal { split, left, right } = &tree.nodes()[id] else {
            return Err(format!("step {i}: reached leaf {id} early"));
        };
        if step.node_id != id || step.feature_index != split.feature || step.predicate != split.test {
            return Err(format!("step {i}: predicate does not match node {id}"));
        }
        let go_left = split
            .evaluate(&step.observed)
            .ok_or_else(|| format!("step {i}: observed value has the wrong kind"))?;
        let expected = if go_left { Branch::Left } else { Branch::Right };
        if expected != step.branch {
            return Err(format!("step {i}: branch {:?} but predicate says {expected:?}", step.branch));
        }
        id = if go_left { *left } else { *right };
    }
    match tree.nodes()[id] {
        Node::Leaf { .. } if id == trace.leaf_id => Ok(id),
        Node::Leaf { .. } => Err(format!("replay reached leaf {id}, trace claims {}", trace.leaf_id)),
        Node::Internal { .. } => Err(format!("replay stopped at internal node {id}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{SplitPredicate, SplitTest, TrainParams};
    use crate::types::{FeatureDef, FeatureValue, LabelDef};

    fn stump() -> DecisionTree {
        let schema = Schema::new(
            vec![FeatureDef::numeric("x1")],
            LabelDef {
                name: "y".into(),
                vocabulary: vec!["A".into(), "B".into()],
            },
        )
        .unwrap();
        DecisionTree::from_parts(
            schema,
            TrainParams::default(),
            vec![
                Node::Internal {
                    split: SplitPredicate {
                        feature: 0,
                        test: SplitTest::NumericLe { threshold: 5.5 },
                    },
                    left: 1,
                    right: 2,
                },
                Node::Leaf {
                    distribution: vec![1.0, 0.0],
                    n_train: 2,
                },
                Node::Leaf {
                    distribution: vec![0.0, 1.0],
                    n_train: 2,
                },
            ],
            0,
            vec![Some([1.0, 10.0])],
        )
        .unwrap()
    }

    #[test]
    fn stump_trace_has_one_left_step() {
        let v = stump()
            .predict_with_trace(&StructuredInput::new(vec![FeatureValue::Numeric(3.0)], "x"))
            .unwrap();
        assert_eq!(v.outcome, "A");
        assert_eq!(v.confidence, 1.0);
        let t = v.trace().unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0].rendered, "x1 ≤ 5.5");
        assert_eq!(t.steps[0].observed, FeatureValue::Numeric(3.0));
        assert_eq!(t.steps[0].branch, Branch::Left);
        assert_eq!(replay_trace(&stump(), t), Ok(1));
    }

    #[test]
    fn single_leaf_has_empty_trace() {
        let schema = stump().schema().clone();
        let t = DecisionTree::from_parts(
            schema,
            TrainParams::default(),
            vec![Node::Leaf {
                distribution: vec![0.25, 0.75],
                n_train: 4,
            }],
            0,
            vec![None],
        )
        .unwrap();
        let v = t
            .predict_with_trace(&StructuredInput::new(vec![FeatureValue::Numeric(0.0)], "x"))
            .unwrap();
        assert_eq!(v.outcome, "B");
        assert_eq!(v.confidence, 0.75);
        assert!(v.trace().unwrap().steps.is_empty());
    }

    #[test]
    fn tied_leaf_picks_first_label() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let err = stump()
            .predict_with_trace(&StructuredInput::new(vec![FeatureValue::Boolean(true)], "x"))
            .unwrap_err();
        assert!(matches!(err, TreeError::SchemaMismatch(_)));
    }

    #[test]
    fn tampered_trace_fails_replay() {
        let tree = stump();
        let v = tree
            .predict_with_trace(&StructuredInput::new(vec![FeatureValue::Numeric(3.0)], "x"))
            .unwrap();
        let mut t = v.trace().unwrap().clone();
        t.steps[0].branch = Branch::Right;
        assert!(replay_trace(&tree, &t).is_err());
        let mut t = v.trace().unwrap().clone();
        t.leaf_id = 2;
        assert!(replay_trace(&tree, &t).is_err());
    }
}
