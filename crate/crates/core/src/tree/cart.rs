use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::{find_split, goes_left, SplitOptions};
use super::{Dataset, DecisionTree, Forest, Node, TrainParams, TreeError};

/// Greedy recursive partitioning of `dataset` under `params`.
pub fn train_cart(dataset: &Dataset, params: &TrainParams) -> Result<DecisionTree, TreeError> {
    params.validate()?;
    let rows: Vec<usize> = (0..dataset.len()).collect();
    let nodes = Grower::new(dataset, params, None).run(rows);
    Ok(DecisionTree {
        schema: dataset.schema().clone(),
        params: params.clone(),
        nodes,
        root: 0,
        feature_ranges: dataset.numeric_ranges(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub feature_subsample_count: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    pub master_seed: u64,
}

fn default_bootstrap() -> bool {
    true
}

impl ForestParams {
    pub fn new(n_trees: usize, feature_subsample_count: usize, master_seed: u64) -> Self {
        Self {
            n_trees,
            feature_subsample_count,
            bootstrap: true,
            master_seed,
        }
    }
}

/// Trains `n_trees` trees, each on a bootstrap resample seeded from
/// `master_seed + tree index`, drawing candidate features per node.
pub fn train_forest(dataset: &Dataset, params: &TrainParams, forest: &ForestParams) -> Result<Forest, TreeError> {
    params.validate()?;
    let k = dataset.schema().len();
    if forest.n_trees < 1 {
        return Err(TreeError::InvalidParams("n_trees ≥ 1".into()));
    }
    if forest.feature_subsample_count < 1 || forest.feature_subsample_count > k {
        return Err(TreeError::InvalidParams(format!(
            "feature_subsample_count must lie in [1, {k}]"
        )));
    }
    let seeds: Vec<u64> = (0..forest.n_trees as u64)
        .map(|i| forest.master_seed.wrapping_add(i))
        .collect();
    let ranges = dataset.numeric_ranges();
    // Each tree owns its RNG, so the result does not depend on scheduling.
    let trees = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = dataset.len();
            let rows: Vec<usize> = if forest.bootstrap {
                (0..m).map(|_| rng.gen_range(0..m)).collect()
            } else {
                (0..m).collect()
            };
            let sampler = (forest.feature_subsample_count < k).then_some((rng, forest.feature_subsample_count));
            let nodes = Grower::new(dataset, params, sampler).run(rows);
            DecisionTree {
                schema: dataset.schema().clone(),
                params: params.clone(),
                nodes,
                root: 0,
                feature_ranges: ranges.clone(),
            }
        })
        .collect();
    Ok(Forest {
        trees,
        seeds,
        feature_subsample_count: forest.feature_subsample_count,
        bootstrap: forest.bootstrap,
        master_seed: forest.master_seed,
    })
}

struct Grower<'a> {
    dataset: &'a Dataset,
    params: &'a TrainParams,
    opts: SplitOptions,
    sampler: Option<(ChaCha8Rng, usize)>,
    nodes: Vec<Node>,
}

impl<'a> Grower<'a> {
    fn new(dataset: &'a Dataset, params: &'a TrainParams, sampler: Option<(ChaCha8Rng, usize)>) -> Self {
        Self {
            dataset,
            params,
            opts: SplitOptions {
                criterion: params.criterion,
                min_leaf: params.min_leaf,
                min_split_gain: params.min_split_gain,
            },
            sampler,
            nodes: Vec::new(),
        }
    }

    fn run(mut self, rows: Vec<usize>) -> Vec<Node> {
        self.grow(rows, 0);
        self.nodes
    }

    fn candidates(&mut self) -> Vec<usize> {
        let k = self.dataset.schema().len();
        match &mut self.sampler {
            Some((rng, count)) => {
                let mut picked = sample(rng, k, *count).into_vec();
                picked.sort_unstable();
                picked
            }
            None => (0..k).collect(),
        }
    }

    fn leaf(&self, rows: &[usize]) -> Node {
        let mut counts = vec![0usize; self.dataset.schema().labels().len()];
        for &r in rows {
            counts[self.dataset.labels()[r]] += 1;
        }
        let n = rows.len() as f64;
        Node::Leaf {
            distribution: counts.iter().map(|&c| c as f64 / n).collect(),
            n_train: rows.len(),
        }
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let leaf = self.leaf(&rows);
        self.nodes.push(leaf);
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_leaf {
            return id;
        }
        let candidates = self.candidates();
        let Some((split, _gain)) = find_split(self.dataset, &rows, &candidates, &self.opts) else {
            return id;
        };
        let column = self.dataset.column(split.feature);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| goes_left(self.dataset, &split, column[r]));
        drop(rows);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = Node::Internal { split, left, right };
        id
    }
}
