use std::collections::BTreeMap;

use crate::types::FeatureKind;

use super::{Criterion, Dataset, SplitPredicate, SplitTest};

/// Gains closer than this are treated as equal, so the declared tie-break
/// (lower feature index, then lower threshold or category) decides.
pub const GAIN_TOLERANCE: f64 = 1e-12;

pub fn impurity_from_counts(counts: &[usize], criterion: Criterion) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    match criterion {
        Criterion::Gini => {
            1.0 - counts
                .iter()
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p
                })
                .sum::<f64>()
        }
        Criterion::Entropy => -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.log2()
            })
            .sum::<f64>(),
    }
}

/// Impurity of a label multiset. An empty multiset has zero impurity.
pub fn impurity<L: Ord>(labels: &[L], criterion: Criterion) -> f64 {
    let mut counts: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    impurity_from_counts(&counts.into_values().collect::<Vec<_>>(), criterion)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub criterion: Criterion,
    pub min_leaf: usize,
    pub min_split_gain: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            criterion: Criterion::Gini,
            min_leaf: 1,
            min_split_gain: 0.0,
        }
    }
}

/// Best impurity-decreasing split over all rows of `dataset`, restricted to
/// `candidate_features`.
pub fn best_split(
    dataset: &Dataset,
    candidate_features: &[usize],
    criterion: Criterion,
) -> Option<(SplitPredicate, f64)> {
    let rows: Vec<usize> = (0..dataset.len()).collect();
    find_split(
        dataset,
        &rows,
        candidate_features,
        &SplitOptions {
            criterion,
            ..SplitOptions::default()
        },
    )
}

struct Best {
    predicate: SplitPredicate,
    gain: f64,
}

struct Scorer<'a> {
    parent: &'a [usize],
    parent_impurity: f64,
    n: usize,
    opts: &'a SplitOptions,
    best: Option<Best>,
}

impl Scorer<'_> {
    fn offer(&mut self, left: &[usize], n_left: usize, predicate: impl FnOnce() -> SplitPredicate) {
        let n_right = self.n - n_left;
        if n_left < self.opts.min_leaf || n_right < self.opts.min_leaf {
            return;
        }
        let right: Vec<usize> = self.parent.iter().zip(left).map(|(p, l)| p - l).collect();
        let n = self.n as f64;
        let gain = self.parent_impurity
            - (n_left as f64 / n) * impurity_from_counts(left, self.opts.criterion)
            - (n_right as f64 / n) * impurity_from_counts(&right, self.opts.criterion);
        if gain < self.opts.min_split_gain - GAIN_TOLERANCE {
            return;
        }
        if self.best.as_ref().is_none_or(|b| gain > b.gain + GAIN_TOLERANCE) {
            self.best = Some(Best {
                predicate: predicate(),
                gain,
            });
        }
    }
}

/// Midpoint strictly below `hi` and at or above `lo`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) * 0.5;
    if t >= lo && t < hi {
        t
    } else {
        lo
    }
}

pub(crate) fn find_split(
    dataset: &Dataset,
    rows: &[usize],
    candidate_features: &[usize],
    opts: &SplitOptions,
) -> Option<(SplitPredicate, f64)> {
    let schema = dataset.schema();
    let n_labels = schema.labels().len();
    let labels = dataset.labels();
    let mut parent = vec![0usize; n_labels];
    for &r in rows {
        parent[labels[r]] += 1;
    }
    if rows.len() < 2 || parent.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let mut features = candidate_features.to_vec();
    features.sort_unstable();
    features.dedup();

    let mut scorer = Scorer {
        parent: &parent,
        parent_impurity: impurity_from_counts(&parent, opts.criterion),
        n: rows.len(),
        opts,
        best: None,
    };

    for f in features {
        let Some(def) = schema.feature(f) else { continue };
        let col = dataset.column(f);
        match def.kind {
            FeatureKind::Numeric => {
                let mut sorted: Vec<(f64, usize)> = rows.iter().map(|&r| (col[r], labels[r])).collect();
                sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut left = vec![0usize; n_labels];
                for i in 0..sorted.len() - 1 {
                    left[sorted[i].1] += 1;
                    let (lo, hi) = (sorted[i].0, sorted[i + 1].0);
                    if lo < hi {
                        scorer.offer(&left, i + 1, || SplitPredicate {
                            feature: f,
                            test: SplitTest::NumericLe {
                                threshold: midpoint(lo, hi),
                            },
                        });
                    }
                }
            }
            FeatureKind::Boolean => {
                let mut left = vec![0usize; n_labels];
                let mut n_left = 0;
                for &r in rows {
                    if col[r] == 0.0 {
                        left[labels[r]] += 1;
                        n_left += 1;
                    }
                }
                scorer.offer(&left, n_left, || SplitPredicate {
                    feature: f,
                    test: SplitTest::BooleanIs { value: false },
                });
            }
            FeatureKind::Categorical => {
                let vocab = def.vocabulary.as_deref().unwrap_or_default();
                if vocab.len() < 2 {
                    continue;
                }
                let mut per_category = vec![vec![0usize; n_labels]; vocab.len()];
                let mut sizes = vec![0usize; vocab.len()];
                for &r in rows {
                    let c = col[r] as usize;
                    per_category[c][labels[r]] += 1;
                    sizes[c] += 1;
                }
                let mut order: Vec<usize> = (0..vocab.len()).collect();
                order.sort_by(|&a, &b| vocab[a].cmp(&vocab[b]));
                for c in order {
                    scorer.offer(&per_category[c], sizes[c], || SplitPredicate {
                        feature: f,
                        test: SplitTest::CategoricalIn {
                            categories: vec![vocab[c].clone()],
                        },
                    });
                }
            }
        }
    }
    scorer.best.map(|b| (b.predicate, b.gain))
}

/// Evaluates a predicate against an encoded column value.
pub(crate) fn goes_left(dataset: &Dataset, predicate: &SplitPredicate, encoded: f64) -> bool {
    match &predicate.test {
        SplitTest::NumericLe { threshold } => encoded <= *threshold,
        SplitTest::BooleanIs { value } => (encoded != 0.0) == *value,
        SplitTest::CategoricalIn { categories } => {
            let def = &dataset.schema().features()[predicate.feature];
            let vocab = def.vocabulary.as_deref().unwrap_or_default();
            categories.iter().any(|c| vocab.get(encoded as usize) == Some(c))
        }
    }
}
