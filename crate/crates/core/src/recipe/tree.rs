//! CART regression trees and a bootstrap committee of them, used to fill
//! in a missing numeric column.

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_leaf: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_leaf: 5,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Least-squares regression tree with axis-aligned splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    /// Fits on the rows of `x` listed in `rows` (repeats allowed).
    pub fn fit(x: ArrayView2<f64>, y: &[f64], rows: &[usize], params: TreeParams) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut rows = rows.to_vec();
        tree.grow(x, y, &mut rows, 0, params);
        tree
    }

    fn grow(
        &mut self,
        x: ArrayView2<f64>,
        y: &[f64],
        rows: &mut [usize],
        depth: usize,
        params: TreeParams,
    ) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(TreeNode::Leaf(mean));

        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || rows.len() < 2 * params.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = best_split(x, y, rows, params.min_leaf.max(1)) else {
            return id;
        };
        let mut cut = 0;
        for k in 0..rows.len() {
            if x[[rows[k], feature]] <= threshold {
                rows.swap(k, cut);
                cut += 1;
            }
        }
        let (l, r) = rows.split_at_mut(cut);
        let left = self.grow(x, y, l, depth + 1, params);
        let right = self.grow(x, y, r, depth + 1, params);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    pub fn predict(&self, row: ArrayView1<f64>) -> f64 {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf(_)))
            .count()
    }
}

/// Split with the largest reduction in squared error that leaves at least
/// `min_leaf` rows on each side.
fn best_split(
    x: ArrayView2<f64>,
    y: &[f64],
    rows: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64)> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
    let parent_sse = total_sq - total * total / n as f64;
    if parent_sse <= 1e-12 * total_sq.max(1.0) {
        return None;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = rows.to_vec();
    for f in 0..x.ncols() {
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for k in 0..n - 1 {
            let yi = y[order[k]];
            left_sum += yi;
            left_sq += yi * yi;
            let nl = k + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (a, b) = (x[[order[k], f]], x[[order[k + 1], f]]);
            if a == b {
                continue;
            }
            let right_sum = total - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / nl as f64)
                + (right_sq - right_sum * right_sum / nr as f64);
            if best.is_none_or(|(s, _, _)| sse < s) {
                let mut threshold = 0.5 * (a + b);
                if threshold >= b {
                    threshold = a;
                }
                best = Some((sse, f, threshold));
            }
        }
    }
    best.filter(|&(sse, _, _)| sse < parent_sse)
        .map(|(_, f, t)| (f, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputerParams {
    pub num_trees: usize,
    pub tree: TreeParams,
}

impl Default for ImputerParams {
    fn default() -> Self {
        ImputerParams {
            num_trees: 25,
            tree: TreeParams::default(),
        }
    }
}

/// Mean prediction of regression trees fitted on bootstrap resamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedImputer {
    pub trees: Vec<RegressionTree>,
    pub params: ImputerParams,
    pub dim: usize,
}

impl BaggedImputer {
    /// Every row of `x` and every `y` must be observed.
    pub fn fit(x: ArrayView2<f64>, y: &[f64], params: ImputerParams, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: y.len(),
            });
        }
        if params.num_trees == 0 {
            return Err(Error::arg("imputer needs at least one tree"));
        }
        if n < params.num_trees {
            return Err(Error::arg(format!(
                "imputer needs at least {} complete rows, got {n}",
                params.num_trees
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::arg(
                "imputer training rows must be complete and finite",
            ));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let seeds: Vec<u64> = (0..params.num_trees).map(|_| master.next_u64()).collect();
        let trees = seeds
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                RegressionTree::fit(x, y, &rows, params.tree)
            })
            .collect();
        Ok(BaggedImputer {
            trees,
            params,
            dim: x.ncols(),
        })
    }

    pub fn predict(&self, row: ArrayView1<f64>) -> Result<f64> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: row.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64)
    }
}

pub fn fit_bagged_imputer(
    x: ArrayView2<f64>,
    y: &[f64],
    params: ImputerParams,
    seed: u64,
) -> Result<BaggedImputer> {
    BaggedImputer::fit(x, y, params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn step_function_is_recovered() {
        let x = Array2::from_shape_fn((40, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..40).map(|i| if i < 20 { 1.0 } else { 5.0 }).collect();
        let rows: Vec<usize> = (0..40).collect();
        let t = RegressionTree::fit(x.view(), &y, &rows, TreeParams::default());
        assert_eq!(t.num_leaves(), 2);
        assert_eq!(t.predict(array![3.0].view()), 1.0);
        assert_eq!(t.predict(array![30.0].view()), 5.0);
    }

    #[test]
    fn leaves_respect_min_size() {
        let x = Array2::from_shape_fn((50, 2), |(i, j)| ((i * 7 + j * 13) % 17) as f64);
        let y: Vec<f64> = (0..50).map(|i| (i % 9) as f64).collect();
        let rows: Vec<usize> = (0..50).collect();
        let t = RegressionTree::fit(
            x.view(),
            &y,
            &rows,
            TreeParams {
                min_leaf: 5,
                max_depth: None,
            },
        );
        assert!(t.num_leaves() <= 10);
    }

    #[test]
    fn constant_target_imputes_the_constant() {
        let x = Array2::from_shape_fn((60, 3), |(i, j)| (i * (j + 1)) as f64);
        let y = vec![7.0; 60];
        let imp = BaggedImputer::fit(x.view(), &y, ImputerParams::default(), 3).unwrap();
        assert_eq!(imp.predict(array![1.0, 100.0, -4.0].view()).unwrap(), 7.0);
    }

    #[test]
    fn predictions_stay_within_observed_range() {
        let x = Array2::from_shape_fn((80, 2), |(i, j)| ((i * 11 + j * 5) % 23) as f64);
        let y: Vec<f64> = (0..80).map(|i| ((i * 37) % 19) as f64 - 3.0).collect();
        let imp = BaggedImputer::fit(x.view(), &y, ImputerParams::default(), 5).unwrap();
        for q in [array![-100.0, 0.0], array![5.0, 5.0], array![1e6, -1e6]] {
            let p = imp.predict(q.view()).unwrap();
            assert!((-3.0..=15.0).contains(&p));
        }
    }

    #[test]
    fn beats_mean_imputation_on_linear_signal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 500.0).unwrap();
        let n = 1200;
        let annual: Vec<f64> = (0..n)
            .map(|_| rng.random_range(5_000.0..30_000.0))
            .collect();
        let commute: Vec<f64> = annual
            .iter()
            .map(|a| 0.5 * a + noise.sample(&mut rng))
            .collect();
        let x = Array2::from_shape_fn((n, 1), |(i, _)| annual[i]);
        let train = 900;
        let imp = BaggedImputer::fit(
            x.slice(ndarray::s![..train, ..]),
            &commute[..train],
            ImputerParams::default(),
            1,
        )
        .unwrap();
        let mean = commute[..train].iter().sum::<f64>() / train as f64;
        let (mut se_tree, mut se_mean) = (0.0, 0.0);
        for (i, &c) in commute.iter().enumerate().skip(train) {
            se_tree += (imp.predict(x.row(i)).unwrap() - c).powi(2);
            se_mean += (mean - c).powi(2);
        }
        assert!(se_tree < se_mean / 4.0, "{se_tree} vs {se_mean}");
    }

    #[test]
    fn needs_enough_complete_rows() {
        let x = Array2::zeros((10, 1));
        assert!(BaggedImputer::fit(x.view(), &[1.0; 10], ImputerParams::default(), 0).is_err());
        let x = Array2::from_elem((30, 1), f64::NAN);
        assert!(BaggedImputer::fit(x.view(), &[1.0; 30], ImputerParams::default(), 0).is_err());
    }

    #[test]
    fn same_seed_same_committee() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| ((i * 3 + j) % 7) as f64);
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let a = BaggedImputer::fit(x.view(), &y, ImputerParams::default(), 4).unwrap();
        let b = BaggedImputer::fit(x.view(), &y, ImputerParams::default(), 4).unwrap();
        assert_eq!(a, b);
    }
}
