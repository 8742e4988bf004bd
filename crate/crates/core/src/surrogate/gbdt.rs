//! Least-absolute-deviation gradient boosting over binary features.
//!
//! Each round fits a regression tree to the current residuals. Splits test a
//! single bit (0 goes left, 1 goes right) and are chosen by the largest drop
//! in the sum of absolute deviations from the node median; ties go to the
//! lowest feature index. Leaf values are the in-leaf residual medians, i.e.
//! the exact line search for the sign pseudo-gradient of the absolute loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{median, median_sorted, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self { trees: 200, max_depth: 4, learning_rate: 0.1, min_samples_leaf: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Node {
    Leaf(f64),
    Split { feature: u32, left: u32, right: u32 },
}

/// Flat arena; node 0 is the root. Leaf values are already shrunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub(crate) nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[u8]) -> f64 {
        let mut at = 0usize;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split { feature, left, right } => {
                    at = if row[feature as usize] == 0 { left as usize } else { right as usize };
                }
            }
        }
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

/// One boosted ensemble: `init + sum(tree(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LadBooster {
    pub(crate) init: f64,
    pub(crate) trees: Vec<Tree>,
}

/// Sum of absolute deviations from the median of an ascending slice.
fn sad_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    let lower: f64 = v[..n / 2].iter().sum();
    let upper: f64 = v[n.div_ceil(2)..].iter().sum();
    upper - lower
}

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    residual: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl TreeBuilder<'_> {
    fn partition(&mut self, rows: &[usize], feature: usize) {
        self.left.clear();
        self.right.clear();
        for &r in rows {
            if self.x.row(r)[feature] == 0 {
                self.left.push(r);
            } else {
                self.right.push(r);
            }
        }
    }

    /// For every feature, the summed child SAD of splitting on it and the
    /// size of the right child, in two row-major passes. Within a child of
    /// size `m`, the element at rank `p` counts negatively below `m / 2`,
    /// positively from `(m + 1) / 2` on, and not at all as an odd median.
    fn split_costs(&self, rows: &[usize]) -> Vec<(f64, usize)> {
        let d = self.x.cols();
        let n = rows.len();
        let mut ones = vec![0usize; d];
        for &r in rows {
            for (c, &b) in ones.iter_mut().zip(self.x.row(r)) {
                *c += b as usize;
            }
        }
        let mut seen_ones = vec![0usize; d];
        let mut sad = vec![0.0f64; d];
        for (i, &r) in rows.iter().enumerate() {
            let v = self.residual[r];
            let row = self.x.row(r);
            for f in 0..d {
                let (rank, m) = if row[f] == 1 {
                    seen_ones[f] += 1;
                    (seen_ones[f] - 1, ones[f])
                } else {
                    (i - seen_ones[f], n - ones[f])
                };
                if rank < m / 2 {
                    sad[f] -= v;
                } else if rank >= m.div_ceil(2) {
                    sad[f] += v;
                }
            }
        }
        sad.into_iter().zip(ones).collect()
    }

    /// `rows` must be ordered by ascending residual; stable partitions keep
    /// both children ordered, so medians need no further sorting.
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> u32 {
        let values: Vec<f64> = rows.iter().map(|&r| self.residual[r]).collect();
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf(self.params.learning_rate * median_sorted(&values)));

        let min_leaf = self.params.min_samples_leaf;
        if depth >= self.params.max_depth || rows.len() < 2 * min_leaf {
            return id;
        }
        let parent = sad_sorted(&values);
        let mut best: Option<(usize, f64)> = None;
        for (feature, (sad, n_right)) in self.split_costs(&rows).into_iter().enumerate() {
            if n_right < min_leaf || rows.len() - n_right < min_leaf {
                continue;
            }
            let gain = parent - sad;
            if gain > 1e-12 * (1.0 + parent.abs()) && best.is_none_or(|(_, g)| gain > g) {
                best = Some((feature, gain));
            }
        }
        let Some((feature, _)) = best else {
            return id;
        };
        self.partition(&rows, feature);
        let (l, r) = (std::mem::take(&mut self.left), std::mem::take(&mut self.right));
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id as usize] = Node::Split { feature: feature as u32, left, right };
        id
    }
}

fn fit_tree(x: &FeatureMatrix, residual: &[f64], rows: &[usize], params: &GbdtParams) -> Tree {
    let mut ordered = rows.to_vec();
    ordered.sort_by(|&a, &b| residual[a].total_cmp(&residual[b]).then(a.cmp(&b)));
    let mut builder = TreeBuilder {
        x,
        residual,
        params,
        nodes: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
    };
    builder.build(ordered, 0);
    Tree { nodes: builder.nodes }
}

impl LadBooster {
    /// Boosts on the given rows of `x` (repeats allowed, e.g. a bootstrap).
    pub fn fit_rows(x: &FeatureMatrix, y: &[f64], rows: &[usize], params: &GbdtParams) -> Self {
        let targets: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        let init = median(&targets);
        // Positions into `sample` stand in for row ids so repeated rows keep
        // independent residual slots.
        let sample = x.select(rows);
        let mut residual: Vec<f64> = targets.iter().map(|t| t - init).collect();
        let positions: Vec<usize> = (0..rows.len()).collect();
        let mut trees = Vec::with_capacity(params.trees);
        for _ in 0..params.trees {
            let tree = fit_tree(&sample, &residual, &positions, params);
            for (p, r) in residual.iter_mut().enumerate() {
                *r -= tree.predict(sample.row(p));
            }
            let done = tree.leaves() == 1 && tree.predict(sample.row(0)) == 0.0;
            trees.push(tree);
            if done {
                break;
            }
        }
        Self { init, trees }
    }

    pub fn fit(x: &FeatureMatrix, y: &[f64], params: &GbdtParams) -> Self {
        let rows: Vec<usize> = (0..x.rows()).collect();
        Self::fit_rows(x, y, &rows, params)
    }

    /// Fits on a bootstrap resample drawn from `seed`.
    pub fn fit_bootstrap(x: &FeatureMatrix, y: &[f64], params: &GbdtParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = x.rows();
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        Self::fit_rows(x, y, &rows, params)
    }

    pub fn predict(&self, row: &[u8]) -> f64 {
        self.predict_rounds(row, self.trees.len())
    }

    /// Prediction using only the first `rounds` trees.
    pub fn predict_rounds(&self, row: &[u8], rounds: usize) -> f64 {
        self.init + self.trees[..rounds.min(self.trees.len())].iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn rounds(&self) -> usize {
        self.trees.len()
    }
}
